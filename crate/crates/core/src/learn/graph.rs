//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so a node's inputs always have
//! smaller indices and the tape itself is a topological order. `detach`
//! creates a node that copies its input's value but passes no gradient back.

use rayon::prelude::*;

use super::tensor::Tensor;
use super::LearnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Below this angle the Rodrigues coefficients use their series expansions.
const RODRIGUES_SERIES: f64 = 1e-2;
const BATCH_STD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    BatchStd(Var, Vec<f64>),
    Rodrigues(Var),
    Mat3Mul(Var, Var),
    RigidPoints { g: Var, p: Var, scale: Var, local: Vec<[f64; 3]> },
    WeakProject { joints: Var, cam: Var },
    FullPerspective { joints: Var, tz: Var, s: Var, t: Var, ctx: Vec<[f64; 5]>, mask: Vec<bool> },
    Bilinear { map: Var, pts: Var, channels: usize, size: usize },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Detach(a) | Scale(a, _) | Square(a) | Abs(a) | Relu(a) | Sigmoid(a) | Sum(a) | Mean(a) | Gather(a, _)
            | BatchStd(a, _) | Rodrigues(a) => vec![*a],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | Mat3Mul(a, b) => vec![*a, *b],
            Concat(v) => v.clone(),
            RigidPoints { g, p, scale, .. } => vec![*g, *p, *scale],
            WeakProject { joints, cam } => vec![*joints, *cam],
            FullPerspective { joints, tz, s, t, .. } => vec![*joints, *tz, *s, *t],
            Bilinear { map, pts, .. } => vec![*map, *pts],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Norm of the gradient at `v`, zero when nothing reached it.
    pub fn norm(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, Tensor::norm)
    }
}

fn bshape(a: &Tensor, b: &Tensor) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
        }
    };
    (dim(a.rows, b.rows), dim(a.cols, b.cols))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    (if t.rows == 1 { 0 } else { r }) * t.cols + if t.cols == 1 { 0 } else { c }
}

/// Sums a broadcast gradient back down to the shape of `like`.
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        return g.clone();
    }
    let mut out = Tensor::zeros(like.rows, like.cols);
    for r in 0..g.rows {
        for c in 0..g.cols {
            out.data[bidx(like, r, c)] += g.data[r * g.cols + c];
        }
    }
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|&v| f(v)).collect() }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect() }
}

const PAR_WORK: usize = 1 << 16;

/// `a · b` for row-major `a: m×k`, `b: k×n`, or `a · bᵀ` when `b_t` is set
/// (then `b` is `n×k`). Rows are independent, so splitting them across
/// threads does not change any result.
fn matmul(a: &Tensor, b: &Tensor, b_t: bool) -> Tensor {
    let (m, k) = a.shape();
    let n = if b_t { b.rows } else { b.cols };
    assert_eq!(if b_t { b.cols } else { b.rows }, k, "matmul inner dimensions differ");
    let mut out = Tensor::zeros(m, n);
    let row = |i: usize, dst: &mut [f64]| {
        let ar = a.row(i);
        if b_t {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            }
        } else {
            for (p, &av) in ar.iter().enumerate() {
                if av != 0.0 {
                    for (d, bv) in dst.iter_mut().zip(b.row(p)) {
                        *d += av * bv;
                    }
                }
            }
        }
    };
    if n > 0 && m * k * n >= PAR_WORK && rayon::current_num_threads() > 1 {
        out.data.par_chunks_mut(n).enumerate().for_each(|(i, dst)| row(i, dst));
    } else if n > 0 {
        out.data.chunks_mut(n).enumerate().for_each(|(i, dst)| row(i, dst));
    }
    out
}

/// `aᵀ · g` for `a: m×k`, `g: m×n`, accumulated over rows in index order.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let n = g.cols;
    let mut out = Tensor::zeros(k, n);
    let col = |p: usize, dst: &mut [f64]| {
        for i in 0..m {
            let av = a.data[i * k + p];
            if av != 0.0 {
                for (d, gv) in dst.iter_mut().zip(g.row(i)) {
                    *d += av * gv;
                }
            }
        }
    };
    if n > 0 && m * k * n >= PAR_WORK && rayon::current_num_threads() > 1 {
        out.data.par_chunks_mut(n).enumerate().for_each(|(p, dst)| col(p, dst));
    } else if n > 0 {
        out.data.chunks_mut(n).enumerate().for_each(|(p, dst)| col(p, dst));
    }
    out
}

fn hat(w: [f64; 3]) -> [f64; 9] {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

fn mm3(a: &[f64], b: &[f64]) -> [f64; 9] {
    let mut o = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            o[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    o
}

/// Coefficients of `R = I + a K + b K²` and their scaled angle derivatives
/// `c = a'/θ`, `d = b'/θ`, with `K` the unnormalized hat matrix.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    if theta < RODRIGUES_SERIES {
        let t4 = t2 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / t2,
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    }
}

fn rodrigues(w: [f64; 3]) -> [f64; 9] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, _, _) = rodrigues_coeffs(theta);
    let k = hat(w);
    let k2 = mm3(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

fn rodrigues_vjp(w: [f64; 3], g: &[f64]) -> [f64; 3] {
    let theta = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    let (a, b, c, d) = rodrigues_coeffs(theta);
    let k = hat(w);
    let k2 = mm3(&k, &k);
    let dot = |m: &[f64; 9]| m.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
    let (gk, gk2) = (dot(&k), dot(&k2));
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let ei = hat(e);
        let ek = mm3(&ei, &k);
        let ke = mm3(&k, &ei);
        let mut sym = [0.0; 9];
        for q in 0..9 {
            sym[q] = ek[q] + ke[q];
        }
        *o = a * dot(&ei) + b * dot(&sym) + w[i] * (c * gk + d * gk2);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad) && !matches!(op, Op::Detach(_));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach(a))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let (r, c) = bshape(x, y);
        if x.shape() == y.shape() {
            return zip_map(x, y, f);
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                out.data[i * c + j] = f(x.data[bidx(x, i, j)], y.data[bidx(y, i, j)]);
            }
        }
        out
    }

    /// Elementwise sum; either side may broadcast along a unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = map(self.value(a), |x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), crate::calibrate::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b), false);
        self.push(v, Op::MatMul(a, b))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Columns `idx` of `a`, in that order.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, idx.len());
        for r in 0..t.rows {
            let src = t.row(r);
            for (k, &i) in idx.iter().enumerate() {
                out.data[r * idx.len() + k] = src[i];
            }
        }
        self.push(out, Op::Gather(a, idx))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        self.gather(a, (start..start + len).collect())
    }

    /// Standardizes every column over the batch (population variance).
    pub fn batch_std(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.rows as f64;
        let mut out = t.clone();
        let mut inv = vec![0.0; t.cols];
        for c in 0..t.cols {
            let mean = (0..t.rows).map(|r| t.get(r, c)).sum::<f64>() / n;
            let var = (0..t.rows).map(|r| (t.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            inv[c] = 1.0 / (var + BATCH_STD_EPS).sqrt();
            for r in 0..t.rows {
                out.data[r * t.cols + c] = (t.get(r, c) - mean) * inv[c];
            }
        }
        self.push(out, Op::BatchStd(a, inv))
    }

    /// Axis-angle triples to row-major rotation matrices: `B×3n → B×9n`.
    pub fn rodrigues(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.cols % 3, 0, "rodrigues expects triples");
        let n = t.cols / 3;
        let mut out = Tensor::zeros(t.rows, 9 * n);
        for r in 0..t.rows {
            for j in 0..n {
                let w = [t.get(r, 3 * j), t.get(r, 3 * j + 1), t.get(r, 3 * j + 2)];
                out.data[r * 9 * n + 9 * j..r * 9 * n + 9 * j + 9].copy_from_slice(&rodrigues(w));
            }
        }
        self.push(out, Op::Rodrigues(a))
    }

    /// Per-row 3×3 product, both operands `B×9` row-major.
    pub fn mat3mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert!(x.cols == 9 && y.cols == 9 && x.rows == y.rows, "mat3mul expects B×9 operands");
        let mut out = Tensor::zeros(x.rows, 9);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&mm3(x.row(r), y.row(r)));
        }
        self.push(out, Op::Mat3Mul(a, b))
    }

    /// `p + scale · G · local_k` for every local point: `B×9, B×3, B×1 → B×3n`.
    pub fn rigid_points(&mut self, g: Var, p: Var, scale: Var, local: Vec<[f64; 3]>) -> Var {
        let (gv, pv, sv) = (self.value(g), self.value(p), self.value(scale));
        assert!(gv.cols == 9 && pv.cols == 3 && sv.cols == 1, "rigid_points shapes");
        let b = gv.rows;
        let n = local.len();
        let mut out = Tensor::zeros(b, 3 * n);
        for r in 0..b {
            let gm = gv.row(r);
            let s = sv.get(r, 0);
            for (k, l) in local.iter().enumerate() {
                for i in 0..3 {
                    let rot = gm[3 * i] * l[0] + gm[3 * i + 1] * l[1] + gm[3 * i + 2] * l[2];
                    out.data[r * 3 * n + 3 * k + i] = pv.get(r, i) + s * rot;
                }
            }
        }
        self.push(out, Op::RigidPoints { g, p, scale, local })
    }

    /// Weak-perspective projection of `B×3J` joints with `B×3` cameras `(s, t_x, t_y)`.
    pub fn weak_project(&mut self, joints: Var, cam: Var) -> Var {
        let (jv, cv) = (self.value(joints), self.value(cam));
        assert!(jv.cols % 3 == 0 && cv.cols == 3 && jv.rows == cv.rows, "weak_project shapes");
        let nj = jv.cols / 3;
        let mut out = Tensor::zeros(jv.rows, 2 * nj);
        for r in 0..jv.rows {
            let (s, tx, ty) = (cv.get(r, 0), cv.get(r, 1), cv.get(r, 2));
            for j in 0..nj {
                out.data[r * 2 * nj + 2 * j] = s * (jv.get(r, 3 * j) + tx);
                out.data[r * 2 * nj + 2 * j + 1] = s * (jv.get(r, 3 * j + 1) + ty);
            }
        }
        self.push(out, Op::WeakProject { joints, cam })
    }

    /// Full-perspective projection of crop-camera joints into full-image
    /// normalized coordinates, with the focal length and full translation
    /// derived from `(s, t, t_z)` and each row's `ctx = [c_x, c_y, h_bbox, W, H]`.
    /// Joints with depth at or below `depth_floor` are masked: output 0, no
    /// gradient. Returns the projection and the mask (`true` = kept).
    pub fn full_perspective(
        &mut self,
        joints: Var,
        tz: Var,
        s: Var,
        t: Var,
        ctx: Vec<[f64; 5]>,
        depth_floor: f64,
    ) -> (Var, Vec<bool>) {
        let (jv, zv, sv, tv) = (self.value(joints), self.value(tz), self.value(s), self.value(t));
        let b = jv.rows;
        assert!(jv.cols % 3 == 0 && zv.shape() == (b, 1) && sv.shape() == (b, 1) && tv.shape() == (b, 2) && ctx.len() == b);
        let nj = jv.cols / 3;
        let mut out = Tensor::zeros(b, 2 * nj);
        let mut mask = vec![false; b * nj];
        for r in 0..b {
            let [cx, cy, h, w, hh] = ctx[r];
            let (tzr, sr, tx, ty) = (zv.get(r, 0), sv.get(r, 0), tv.get(r, 0), tv.get(r, 1));
            for j in 0..nj {
                let (x, y, z) = (jv.get(r, 3 * j), jv.get(r, 3 * j + 1), jv.get(r, 3 * j + 2));
                let d = z + tzr;
                if d <= depth_floor {
                    continue;
                }
                mask[r * nj + j] = true;
                out.data[r * 2 * nj + 2 * j] = tzr * (sr * h * (x + tx) + 2.0 * cx - w) / (w * d);
                out.data[r * 2 * nj + 2 * j + 1] = tzr * (sr * h * (y + ty) + 2.0 * cy - hh) / (hh * d);
            }
        }
        let v = self.push(out, Op::FullPerspective { joints, tz, s, t, ctx, mask: mask.clone() });
        (v, mask)
    }

    /// Bilinear lookup of `P` points (`B×2P`, normalized to [-1, 1]) in a
    /// `channels × size × size` grid per row (`B×(C·S·S)`), giving `B×(P·C)`.
    /// Points outside the grid are clamped to the border.
    pub fn bilinear_sample(&mut self, map: Var, pts: Var, channels: usize, size: usize) -> Var {
        let (mv, pv) = (self.value(map), self.value(pts));
        assert!(size >= 2 && mv.cols == channels * size * size && pv.cols % 2 == 0 && mv.rows == pv.rows);
        let np = pv.cols / 2;
        let mut out = Tensor::zeros(mv.rows, np * channels);
        for r in 0..mv.rows {
            for p in 0..np {
                let c = BilinearCell::new(pv.get(r, 2 * p), pv.get(r, 2 * p + 1), size);
                for ch in 0..channels {
                    out.data[r * np * channels + p * channels + ch] = c.sample(mv.row(r), ch, size);
                }
            }
        }
        self.push(out, Op::Bilinear { map, pts, channels, size })
    }

    /// Gradients of the scalar `loss` with respect to every node that depends on a parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients, LearnError> {
        let node = self.nodes.get(loss.0).ok_or(LearnError::CycleDetected(loss.0))?;
        if node.value.shape() != (1, 1) {
            return Err(LearnError::NonScalarLoss(node.value.rows, node.value.cols));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(LearnError::CycleDetected(i));
                }
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, reduce_to(g, val(*a)));
                self.acc(grads, *b, reduce_to(g, val(*b)));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, reduce_to(g, val(*a)));
                let mut nb = reduce_to(g, val(*b));
                nb.scale(-1.0);
                self.acc(grads, *b, nb);
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(g.rows, g.cols);
                let mut gb = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        let k = r * g.cols + c;
                        ga.data[k] = g.data[k] * y.data[bidx(y, r, c)];
                        gb.data[k] = g.data[k] * x.data[bidx(x, r, c)];
                    }
                }
                self.acc(grads, *a, reduce_to(&ga, x));
                self.acc(grads, *b, reduce_to(&gb, y));
            }
            Op::Scale(a, k) => self.acc(grads, *a, map(g, |v| v * k)),
            Op::Square(a) => self.acc(grads, *a, zip_map(g, val(*a), |gv, x| 2.0 * gv * x)),
            Op::Abs(a) => self.acc(grads, *a, zip_map(g, val(*a), |gv, x| gv * x.signum() * (x != 0.0) as i32 as f64)),
            Op::Relu(a) => self.acc(grads, *a, zip_map(g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
            Op::Sigmoid(_) => {
                let y = &self.nodes[i].value;
                let a = match self.nodes[i].op {
                    Op::Sigmoid(a) => a,
                    _ => unreachable!(),
                };
                self.acc(grads, a, zip_map(g, y, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Sum(a) => {
                let t = val(*a);
                self.acc(grads, *a, Tensor::filled(t.rows, t.cols, g.data[0]));
            }
            Op::Mean(a) => {
                let t = val(*a);
                self.acc(grads, *a, Tensor::filled(t.rows, t.cols, g.data[0] / t.len() as f64));
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.acc(grads, *a, matmul(g, val(*b), true));
                }
                if self.nodes[b.0].needs_grad {
                    self.acc(grads, *b, matmul_tn(val(*a), g));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = val(*p).cols;
                    if self.nodes[p.0].needs_grad {
                        let mut t = Tensor::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            t.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.acc(grads, *p, t);
                    }
                    off += cols;
                }
            }
            Op::Gather(a, idx) => {
                let src = val(*a);
                let mut t = Tensor::zeros(src.rows, src.cols);
                for r in 0..g.rows {
                    for (k, &c) in idx.iter().enumerate() {
                        t.data[r * src.cols + c] += g.get(r, k);
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::BatchStd(a, inv) => {
                let y = &self.nodes[i].value;
                let n = y.rows as f64;
                let mut t = Tensor::zeros(y.rows, y.cols);
                for c in 0..y.cols {
                    let sg: f64 = (0..y.rows).map(|r| g.get(r, c)).sum();
                    let sgy: f64 = (0..y.rows).map(|r| g.get(r, c) * y.get(r, c)).sum();
                    for r in 0..y.rows {
                        t.data[r * y.cols + c] = inv[c] / n * (n * g.get(r, c) - sg - y.get(r, c) * sgy);
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::Rodrigues(a) => {
                let w = val(*a);
                let n = w.cols / 3;
                let mut t = Tensor::zeros(w.rows, w.cols);
                for r in 0..w.rows {
                    for j in 0..n {
                        let wj = [w.get(r, 3 * j), w.get(r, 3 * j + 1), w.get(r, 3 * j + 2)];
                        let gj = &g.row(r)[9 * j..9 * j + 9];
                        let d = rodrigues_vjp(wj, gj);
                        t.data[r * w.cols + 3 * j..r * w.cols + 3 * j + 3].copy_from_slice(&d);
                    }
                }
                self.acc(grads, *a, t);
            }
            Op::Mat3Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(x.rows, 9);
                let mut gb = Tensor::zeros(x.rows, 9);
                for r in 0..x.rows {
                    let (xr, yr, gr) = (x.row(r), y.row(r), g.row(r));
                    for i in 0..3 {
                        for j in 0..3 {
                            for k in 0..3 {
                                // C_ik = Σ_j A_ij B_jk
                                ga.data[r * 9 + 3 * i + j] += gr[3 * i + k] * yr[3 * j + k];
                                gb.data[r * 9 + 3 * j + k] += gr[3 * i + k] * xr[3 * i + j];
                            }
                        }
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::RigidPoints { g: gm, p, scale, local } => {
                let (gv, sv) = (val(*gm), val(*scale));
                let b = gv.rows;
                let mut dg = Tensor::zeros(b, 9);
                let mut dp = Tensor::zeros(b, 3);
                let mut ds = Tensor::zeros(b, 1);
                for r in 0..b {
                    let m = gv.row(r);
                    let s = sv.get(r, 0);
                    for (k, l) in local.iter().enumerate() {
                        for i in 0..3 {
                            let up = g.get(r, 3 * k + i);
                            dp.data[r * 3 + i] += up;
                            let rot = m[3 * i] * l[0] + m[3 * i + 1] * l[1] + m[3 * i + 2] * l[2];
                            ds.data[r] += up * rot;
                            for c in 0..3 {
                                dg.data[r * 9 + 3 * i + c] += up * s * l[c];
                            }
                        }
                    }
                }
                self.acc(grads, *gm, dg);
                self.acc(grads, *p, dp);
                self.acc(grads, *scale, ds);
            }
            Op::WeakProject { joints, cam } => {
                let (jv, cv) = (val(*joints), val(*cam));
                let nj = jv.cols / 3;
                let mut dj = Tensor::zeros(jv.rows, jv.cols);
                let mut dc = Tensor::zeros(cv.rows, 3);
                for r in 0..jv.rows {
                    let (s, tx, ty) = (cv.get(r, 0), cv.get(r, 1), cv.get(r, 2));
                    for j in 0..nj {
                        let (gu, gv) = (g.get(r, 2 * j), g.get(r, 2 * j + 1));
                        dj.data[r * jv.cols + 3 * j] = s * gu;
                        dj.data[r * jv.cols + 3 * j + 1] = s * gv;
                        dc.data[r * 3] += gu * (jv.get(r, 3 * j) + tx) + gv * (jv.get(r, 3 * j + 1) + ty);
                        dc.data[r * 3 + 1] += s * gu;
                        dc.data[r * 3 + 2] += s * gv;
                    }
                }
                self.acc(grads, *joints, dj);
                self.acc(grads, *cam, dc);
            }
            Op::FullPerspective { joints, tz, s, t, ctx, mask } => {
                let (jv, zv, sv, tv) = (val(*joints), val(*tz), val(*s), val(*t));
                let nj = jv.cols / 3;
                let b = jv.rows;
                let mut dj = Tensor::zeros(b, jv.cols);
                let mut dz = Tensor::zeros(b, 1);
                let mut dsv = Tensor::zeros(b, 1);
                let mut dt = Tensor::zeros(b, 2);
                for r in 0..b {
                    let [cx, cy, h, w, hh] = ctx[r];
                    let (tzr, sr) = (zv.get(r, 0), sv.get(r, 0));
                    let tr = [tv.get(r, 0), tv.get(r, 1)];
                    for j in 0..nj {
                        if !mask[r * nj + j] {
                            continue;
                        }
                        let z = jv.get(r, 3 * j + 2);
                        let d = z + tzr;
                        for (axis, (c, size)) in [(cx, w), (cy, hh)].into_iter().enumerate() {
                            let up = g.get(r, 2 * j + axis);
                            if up == 0.0 {
                                continue;
                            }
                            let x = jv.get(r, 3 * j + axis) + tr[axis];
                            let q = sr * h * x + 2.0 * c - size;
                            let lin = tzr * sr * h / (size * d);
                            dj.data[r * jv.cols + 3 * j + axis] += up * lin;
                            dt.data[r * 2 + axis] += up * lin;
                            dsv.data[r] += up * tzr * h * x / (size * d);
                            dj.data[r * jv.cols + 3 * j + 2] -= up * tzr * q / (size * d * d);
                            dz.data[r] += up * q * z / (size * d * d);
                        }
                    }
                }
                self.acc(grads, *joints, dj);
                self.acc(grads, *tz, dz);
                self.acc(grads, *s, dsv);
                self.acc(grads, *t, dt);
            }
            Op::Bilinear { map: m, pts, channels, size } => {
                let (mv, pv) = (val(*m), val(*pts));
                let np = pv.cols / 2;
                let mut dm = Tensor::zeros(mv.rows, mv.cols);
                let mut dp = Tensor::zeros(pv.rows, pv.cols);
                let need_map = self.nodes[m.0].needs_grad;
                for r in 0..mv.rows {
                    for p in 0..np {
                        let c = BilinearCell::new(pv.get(r, 2 * p), pv.get(r, 2 * p + 1), *size);
                        for ch in 0..*channels {
                            let up = g.get(r, p * channels + ch);
                            if need_map {
                                c.scatter(dm.row_mut(r), ch, *size, up);
                            }
                            let (du, dv) = c.point_grad(mv.row(r), ch, *size);
                            dp.data[r * pv.cols + 2 * p] += up * du;
                            dp.data[r * pv.cols + 2 * p + 1] += up * dv;
                        }
                    }
                }
                self.acc(grads, *m, dm);
                self.acc(grads, *pts, dp);
            }
        }
    }
}

/// Interpolation cell for one normalized point.
struct BilinearCell {
    x0: usize,
    y0: usize,
    fx: f64,
    fy: f64,
    /// d(grid coordinate)/d(normalized coordinate), zero when clamped.
    sx: f64,
    sy: f64,
}

impl BilinearCell {
    fn new(u: f64, v: f64, size: usize) -> Self {
        let span = (size - 1) as f64;
        let axis = |n: f64| {
            let g = (n + 1.0) / 2.0 * span;
            let inside = (0.0..=span).contains(&g);
            let g = g.clamp(0.0, span);
            let i0 = (g.floor() as usize).min(size - 2);
            (i0, g - i0 as f64, if inside { span / 2.0 } else { 0.0 })
        };
        let (x0, fx, sx) = axis(u);
        let (y0, fy, sy) = axis(v);
        Self { x0, y0, fx, fy, sx, sy }
    }

    fn corners(&self, ch: usize, size: usize) -> [usize; 4] {
        let base = ch * size * size;
        let i = |y: usize, x: usize| base + y * size + x;
        [i(self.y0, self.x0), i(self.y0, self.x0 + 1), i(self.y0 + 1, self.x0), i(self.y0 + 1, self.x0 + 1)]
    }

    fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }

    fn sample(&self, map: &[f64], ch: usize, size: usize) -> f64 {
        self.corners(ch, size).iter().zip(self.weights()).map(|(&k, w)| w * map[k]).sum()
    }

    fn scatter(&self, dmap: &mut [f64], ch: usize, size: usize, up: f64) {
        for (&k, w) in self.corners(ch, size).iter().zip(self.weights()) {
            dmap[k] += up * w;
        }
    }

    fn point_grad(&self, map: &[f64], ch: usize, size: usize) -> (f64, f64) {
        let [a, b, c, d] = self.corners(ch, size).map(|k| map[k]);
        let dfx = (1.0 - self.fy) * (b - a) + self.fy * (d - c);
        let dfy = (1.0 - self.fx) * (c - a) + self.fx * (d - b);
        (dfx * self.sx, dfy * self.sy)
    }
}
