//! Central finite-difference checks of every differentiable graph operation.
//!
//! Each check draws random inputs, contracts the op's output with a fixed
//! random weight tensor to get a scalar, and compares the backward-pass
//! gradient with central differences of that scalar. Inputs are kept away
//! from kinks (ReLU and |x| at 0, cell edges of bilinear sampling, the depth
//! floor) so the difference quotient never straddles one.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::model::{self, CAM_AT, POSE_DIM, SHAPE_AT, THETA_DIM};
use super::tensor::Tensor;
use super::LearnError;
use crate::losses;
use crate::skeleton;

pub const FD_STEP: f64 = 1e-5;

pub const OPS: [&str; 22] = [
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "abs",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "matmul",
    "concat",
    "gather",
    "batch_std",
    "rodrigues",
    "rodrigues_small",
    "mat3mul",
    "rigid_points",
    "weak_project",
    "full_perspective",
    "bilinear",
    "pipeline",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    /// Worst `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the inputs.
    pub max_rel_err: f64,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Uniform values with magnitude at least `gap`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64, hi: f64) -> Tensor {
    Tensor::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(gap..hi) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    )
}

/// Relative error of the gradient of `Σ build(inputs) ⊙ R` for every input.
pub fn fd_check(inputs: &[Tensor], rng: &mut ChaCha8Rng, build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Result<f64, LearnError> {
    let eval = |xs: &[Tensor], r: Option<&Tensor>| -> Result<(f64, Option<Vec<Tensor>>, Tensor), LearnError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.value(out).clone();
        let Some(r) = r else { return Ok((0.0, None, shape)) };
        let rv = g.constant(r.clone());
        let prod = g.mul(out, rv);
        let l = g.sum(prod);
        let grads = g.backward(l)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.rows, x.cols)))
            .collect();
        Ok((g.scalar(l), Some(gs), shape))
    };
    let (_, _, out) = eval(inputs, None)?;
    let r = uniform(rng, out.rows, out.cols, -1.0, 1.0);
    let (_, analytic, _) = eval(inputs, Some(&r))?;
    let analytic = analytic.expect("gradients requested");
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data[i] = x.data[i] + FD_STEP;
            let up = eval(&xs, Some(&r))?.0;
            xs[k].data[i] = x.data[i] - FD_STEP;
            let down = eval(&xs, Some(&r))?.0;
            numeric.data[i] = (up - down) / (2.0 * FD_STEP);
        }
        let a = &analytic[k];
        let diff = a.data.iter().zip(&numeric.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = a.norm().max(numeric.norm());
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    Ok(worst)
}

/// Bilinear sample points whose grid coordinates sit at least `gap` cells from any edge.
fn grid_points(rng: &mut ChaCha8Rng, n: usize, size: usize, gap: f64) -> Vec<f64> {
    let span = (size - 1) as f64;
    (0..n)
        .map(|_| {
            let cell = rng.gen_range(0..size - 1) as f64;
            let frac = rng.gen_range(gap..1.0 - gap);
            (cell + frac) / span * 2.0 - 1.0
        })
        .collect()
}

pub fn check_op(op: &str, seed: u64) -> Result<OpCheck, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let name = OPS.iter().find(|o| **o == op).copied().ok_or_else(|| LearnError::Invalid(format!("unknown op {op}")))?;
    let err = match name {
        "add" | "sub" | "mul" => {
            // Full-shape, row-broadcast and column-broadcast right operands.
            let a = uniform(rng, 3, 4, -2.0, 2.0);
            let mut worst: f64 = 0.0;
            for (r, c) in [(3, 4), (1, 4), (3, 1), (1, 1)] {
                let b = uniform(rng, r, c, -2.0, 2.0);
                let e = fd_check(&[a.clone(), b.clone()], rng, &|g, v| match name {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[1], v[0]),
                    _ => g.mul(v[0], v[1]),
                })?;
                worst = worst.max(e);
            }
            worst
        }
        "scale" => fd_check(&[uniform(rng, 2, 5, -2.0, 2.0)], rng, &|g, v| g.scale(v[0], -1.7))?,
        "square" => fd_check(&[uniform(rng, 2, 5, -2.0, 2.0)], rng, &|g, v| g.square(v[0]))?,
        "abs" => fd_check(&[away_from_zero(rng, 2, 5, 1e-2, 2.0)], rng, &|g, v| g.abs(v[0]))?,
        "relu" => fd_check(&[away_from_zero(rng, 2, 5, 1e-2, 2.0)], rng, &|g, v| g.relu(v[0]))?,
        "sigmoid" => fd_check(&[uniform(rng, 2, 5, -4.0, 4.0)], rng, &|g, v| g.sigmoid(v[0]))?,
        "sum" => fd_check(&[uniform(rng, 3, 3, -1.0, 1.0)], rng, &|g, v| g.sum(v[0]))?,
        "mean" => fd_check(&[uniform(rng, 3, 3, -1.0, 1.0)], rng, &|g, v| g.mean(v[0]))?,
        "matmul" => fd_check(&[uniform(rng, 3, 4, -1.0, 1.0), uniform(rng, 4, 2, -1.0, 1.0)], rng, &|g, v| g.matmul(v[0], v[1]))?,
        "concat" => fd_check(&[uniform(rng, 2, 3, -1.0, 1.0), uniform(rng, 2, 2, -1.0, 1.0)], rng, &|g, v| {
            let c = g.concat(&[v[0], v[1], v[0]]);
            g.square(c)
        })?,
        "gather" => {
            let idx: Vec<usize> = (0..7).map(|_| rng.gen_range(0..5)).collect();
            fd_check(&[uniform(rng, 2, 5, -1.0, 1.0)], rng, &|g, v| g.gather(v[0], idx.clone()))?
        }
        "batch_std" => fd_check(&[uniform(rng, 5, 3, -2.0, 2.0)], rng, &|g, v| g.batch_std(v[0]))?,
        "rodrigues" => fd_check(&[uniform(rng, 2, 6, -2.0, 2.0)], rng, &|g, v| g.rodrigues(v[0]))?,
        "rodrigues_small" => fd_check(&[uniform(rng, 2, 6, -3e-3, 3e-3)], rng, &|g, v| g.rodrigues(v[0]))?,
        "mat3mul" => fd_check(&[uniform(rng, 2, 9, -1.0, 1.0), uniform(rng, 2, 9, -1.0, 1.0)], rng, &|g, v| g.mat3mul(v[0], v[1]))?,
        "rigid_points" => {
            let local: Vec<[f64; 3]> = (0..3).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
            let inputs = [uniform(rng, 2, 9, -1.0, 1.0), uniform(rng, 2, 3, -1.0, 1.0), uniform(rng, 2, 1, 0.5, 1.5)];
            fd_check(&inputs, rng, &|g, v| g.rigid_points(v[0], v[1], v[2], local.clone()))?
        }
        "weak_project" => {
            fd_check(&[uniform(rng, 2, 12, -1.0, 1.0), uniform(rng, 2, 3, 0.5, 1.5)], rng, &|g, v| g.weak_project(v[0], v[1]))?
        }
        "full_perspective" => {
            let ctx: Vec<[f64; 5]> = (0..2)
                .map(|_| {
                    let (w, h) = (rng.gen_range(400.0..2000.0), rng.gen_range(400.0..2000.0));
                    [rng.gen_range(0.2 * w..0.8 * w), rng.gen_range(0.2 * h..0.8 * h), rng.gen_range(50.0..400.0), w, h]
                })
                .collect();
            let inputs = [
                uniform(rng, 2, 12, -0.8, 0.8),
                uniform(rng, 2, 1, 1.0, 6.0),
                uniform(rng, 2, 1, 0.6, 1.4),
                uniform(rng, 2, 2, -0.3, 0.3),
            ];
            fd_check(&inputs, rng, &|g, v| g.full_perspective(v[0], v[1], v[2], v[3], ctx.clone(), model::DEPTH_FLOOR).0)?
        }
        "bilinear" => {
            let (c, size, p) = (2, 5, 3);
            let pts = Tensor::new(2, 2 * p, grid_points(rng, 2 * 2 * p, size, 1e-2));
            let map = uniform(rng, 2, c * size * size, -1.0, 1.0);
            fd_check(&[map, pts], rng, &|g, v| g.bilinear_sample(v[0], v[1], c, size))?
        }
        "pipeline" => pipeline_check(rng)?,
        _ => unreachable!(),
    };
    Ok(OpCheck { op: name, max_rel_err: err })
}

/// Θ and depth through forward kinematics, both projections and every loss
/// term, with nothing detached.
fn pipeline_check(rng: &mut ChaCha8Rng) -> Result<f64, LearnError> {
    let b = 2;
    let template = skeleton::toy_template();
    let mut theta = uniform(rng, b, THETA_DIM, -0.4, 0.4);
    for r in 0..b {
        for k in SHAPE_AT..CAM_AT {
            theta.data[r * THETA_DIM + k] = rng.gen_range(0.9..1.1);
        }
        theta.data[r * THETA_DIM + CAM_AT] = rng.gen_range(0.8..1.2);
    }
    let tz = uniform(rng, b, 1, 2.0, 6.0);
    let ctx: Vec<[f64; 5]> = (0..b).map(|_| [900.0 + rng.gen_range(-200.0..200.0), 500.0, 300.0, 1920.0, 1080.0]).collect();
    let targets = [
        uniform(rng, b, 48, -0.5, 0.5),
        uniform(rng, b, 32, -0.9, 0.9),
        uniform(rng, b, 32, -0.9, 0.9),
        uniform(rng, b, 360, -0.5, 0.5),
        uniform(rng, b, 144, -1.0, 1.0),
    ];
    let kw = uniform(rng, b, 32, 1.0, 5.0);
    fd_check(&[theta, tz], rng, &|g, v| {
        let pose = g.slice(v[0], 0, POSE_DIM);
        let shape = g.slice(v[0], SHAPE_AT, 4);
        let cam = g.slice(v[0], CAM_AT, 3);
        let s = g.slice(cam, 0, 1);
        let t = g.slice(cam, 1, 2);
        let (j3d, verts, rots) = model::fk_graph(g, pose, shape, template);
        let tg: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
        let kwv = g.constant(kw.clone());
        let l3 = losses::mse_node(g, j3d, tg[0]);
        let wp = g.weak_project(j3d, cam);
        let l2 = losses::mse_node(g, wp, tg[1]);
        let (fp, _) = g.full_perspective(j3d, v[1], s, t, ctx.clone(), model::DEPTH_FLOOR);
        let lf = losses::weighted_mse_node(g, fp, tg[2], kwv);
        let lv = losses::l1_node(g, verts, tg[3]);
        let lr = losses::mse_node(g, rots, tg[4]);
        let terms = [l3, l2, lf, lv, lr];
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t);
        }
        total
    })
}

/// Every op at one seed.
pub fn check_all(seed: u64) -> Result<Vec<OpCheck>, LearnError> {
    OPS.iter().map(|op| check_op(op, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..3 {
            for c in check_all(seed).unwrap() {
                assert!(c.max_rel_err < 1e-4, "{} seed {seed}: {}", c.op, c.max_rel_err);
            }
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx of x·x through a detached factor is x, not 2x.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = fd_check(&[uniform(&mut rng, 1, 3, 0.5, 1.0)], &mut rng, &|g, v| {
            let d = g.detach(v[0]);
            g.mul(v[0], d)
        })
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn bilinear_node_and_midpoint() {
        let mut g = Graph::new();
        // One channel, 2×2 grid: nodes at (-1,-1)=1, (1,-1)=3, (-1,1)=5, (1,1)=7.
        let map = g.constant(Tensor::row_vector(vec![1.0, 3.0, 5.0, 7.0]));
        let pts = g.constant(Tensor::row_vector(vec![1.0, -1.0, 0.0, -1.0, 5.0, 5.0]));
        let out = g.bilinear_sample(map, pts, 1, 2);
        assert_eq!(g.value(out).data, vec![3.0, 2.0, 7.0]);
    }

    #[test]
    fn rodrigues_matches_exp_map() {
        let mut g = Graph::new();
        let w = [0.3, -1.1, 0.7, 1e-9, 0.0, -2e-9];
        let v = g.constant(Tensor::row_vector(w.to_vec()));
        let r = g.rodrigues(v);
        for j in 0..2 {
            let m = crate::so3::exp_map(&nalgebra::Vector3::new(w[3 * j], w[3 * j + 1], w[3 * j + 2]));
            let f = crate::so3::flatten(&m);
            for k in 0..9 {
                assert!((g.value(r).data[9 * j + k] - f[k]).abs() < 1e-15);
            }
        }
    }
}
