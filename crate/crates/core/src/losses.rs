//! Supervision terms. Every reduction is a mean over points and coordinates.
//!
//! The plain functions work on values; the `*_node` builders produce the
//! same quantities inside an autodiff [`Graph`].

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, ImageSize};
use crate::learn::{Graph, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("negative loss weight {0}")]
    NegativeWeight(&'static str),
}

/// Loss weights. `lambda1..lambda8` weigh 3D joints, crop 2D joints,
/// full-image 2D joints, sparse/coarse/complete vertices, shape and pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    pub lambda7: f64,
    pub lambda8: f64,
    /// Crop camera `(s, t_x, t_y)` supervision.
    pub lambda_cam: f64,
    /// Pseudo-focal prior, first stage only.
    pub lambda_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 300.0,
            lambda2: 300.0,
            lambda3: 300.0,
            lambda4: 15.0,
            lambda5: 15.0,
            lambda6: 15.0,
            lambda7: 0.06,
            lambda8: 60.0,
            lambda_cam: 3000.0,
            lambda_f: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let named = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
            ("lambda7", self.lambda7),
            ("lambda8", self.lambda8),
            ("lambda_cam", self.lambda_cam),
            ("lambda_f", self.lambda_f),
        ];
        for (name, v) in named {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(LossError::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

fn same_len(what: &'static str, expected: usize, got: usize) -> Result<(), LossError> {
    if expected != got {
        return Err(LossError::ShapeMismatch { what, expected, got });
    }
    Ok(())
}

fn mse3(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / (3 * a.len().max(1)) as f64
}

fn mse2(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / (2 * a.len().max(1)) as f64
}

/// `(W / w_bbox, H / h_bbox)`, applied per axis to normalized full-image residuals.
pub fn dynamic_weight(bbox: &BBox, img: &ImageSize) -> [f64; 2] {
    [img.w / bbox.w, img.h / bbox.h]
}

/// Weighted sum of the 3D, crop 2D and full-image 2D joint errors.
/// `full` and `full_gt` are in full-image normalized coordinates.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    j3d: &[Vector3<f64>],
    j3d_gt: &[Vector3<f64>],
    j2d: &[Vector2<f64>],
    j2d_gt: &[Vector2<f64>],
    full: &[Vector2<f64>],
    full_gt: &[Vector2<f64>],
    bbox: &BBox,
    img: &ImageSize,
    w: &LossWeights,
) -> Result<f64, LossError> {
    let n = j3d.len();
    same_len("3d joints", n, j3d_gt.len())?;
    same_len("crop joints", n, j2d.len())?;
    same_len("crop joints", n, j2d_gt.len())?;
    same_len("full joints", n, full.len())?;
    same_len("full joints", n, full_gt.len())?;
    let finite = j3d.iter().chain(j3d_gt).all(|p| p.iter().all(|v| v.is_finite()))
        && j2d.iter().chain(j2d_gt).chain(full).chain(full_gt).all(|p| p.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(LossError::NonFinite("joint_loss"));
    }
    let [kx, ky] = dynamic_weight(bbox, img);
    let scaled = |p: &Vector2<f64>| Vector2::new(p.x * kx, p.y * ky);
    let full_w: Vec<_> = full.iter().map(scaled).collect();
    let full_gt_w: Vec<_> = full_gt.iter().map(scaled).collect();
    Ok(w.lambda1 * mse3(j3d, j3d_gt) + w.lambda2 * mse2(j2d, j2d_gt) + w.lambda3 * mse2(&full_w, &full_gt_w))
}

/// Mean squared distance of focal lengths from the image-diagonal prior.
pub fn pseudo_focal_loss(f: &[f64], img: &[ImageSize]) -> Result<f64, LossError> {
    same_len("focal lengths", img.len(), f.len())?;
    if f.iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite("pseudo_focal_loss"));
    }
    Ok(f.iter().zip(img).map(|(f, i)| (f - i.w.hypot(i.h)).powi(2)).sum::<f64>() / f.len().max(1) as f64)
}

fn mean_l1(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs().sum()).sum::<f64>() / (3 * a.len().max(1)) as f64
}

/// Mean-L1 vertex error at the sparse, coarse and complete levels.
pub fn vertex_loss(pred: [&[Vector3<f64>]; 3], gt: [&[Vector3<f64>]; 3], w: &LossWeights) -> Result<f64, LossError> {
    for k in 0..3 {
        same_len("vertices", gt[k].len(), pred[k].len())?;
    }
    Ok(w.lambda4 * mean_l1(pred[0], gt[0]) + w.lambda5 * mean_l1(pred[1], gt[1]) + w.lambda6 * mean_l1(pred[2], gt[2]))
}

/// Shape MSE plus MSE over the entries of the per-joint rotation matrices.
pub fn param_loss(beta: &[f64], beta_gt: &[f64], rots: &[f64], rots_gt: &[f64], w: &LossWeights) -> Result<f64, LossError> {
    same_len("shape", beta_gt.len(), beta.len())?;
    same_len("rotations", rots_gt.len(), rots.len())?;
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    Ok(w.lambda7 * mse(beta, beta_gt) + w.lambda8 * mse(rots, rots_gt))
}

/// `mean((a - b)²)` over all entries.
pub fn mse_node(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let s = g.square(d);
    g.mean(s)
}

/// `mean(((a - b) ⊙ w)²)`, with `w` broadcast against the residual.
pub fn weighted_mse_node(g: &mut Graph, a: Var, b: Var, w: Var) -> Var {
    let d = g.sub(a, b);
    let dw = g.mul(d, w);
    let s = g.square(dw);
    g.mean(s)
}

pub fn l1_node(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let s = g.abs(d);
    g.mean(s)
}

/// Per-row weights for the full-image term: the dynamic weight on each axis,
/// zeroed where the projection was masked.
pub fn full_weight_tensor(bboxes: &[BBox], imgs: &[ImageSize], mask: &[bool]) -> Tensor {
    let b = bboxes.len();
    let nj = mask.len() / b.max(1);
    let mut t = Tensor::zeros(b, 2 * nj);
    for r in 0..b {
        let [kx, ky] = dynamic_weight(&bboxes[r], &imgs[r]);
        for j in 0..nj {
            if mask[r * nj + j] {
                t.data[r * 2 * nj + 2 * j] = kx;
                t.data[r * 2 * nj + 2 * j + 1] = ky;
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bbox() -> BBox {
        BBox { cx: 50.0, cy: 50.0, w: 40.0, h: 80.0 }
    }

    fn img(w: f64, h: f64) -> ImageSize {
        ImageSize { w, h }
    }

    fn zeros2(n: usize) -> Vec<Vector2<f64>> {
        vec![Vector2::zeros(); n]
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!([w.lambda1, w.lambda2, w.lambda3], [300.0; 3]);
        assert_eq!([w.lambda4, w.lambda5, w.lambda6], [15.0; 3]);
        assert_eq!((w.lambda7, w.lambda8), (0.06, 60.0));
    }

    #[test]
    fn joint_loss_exact_is_zero() {
        let j = vec![Vector3::new(0.1, 0.2, 0.3); 4];
        let k = vec![Vector2::new(0.5, -0.5); 4];
        let l = joint_loss(&j, &j, &k, &k, &k, &k, &bbox(), &img(100.0, 100.0), &LossWeights::default()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn joint_loss_single_joint_3d() {
        let p = [Vector3::new(1.0, 0.0, 0.0)];
        let q = [Vector3::zeros()];
        let z = zeros2(1);
        let l = joint_loss(&p, &q, &z, &z, &z, &z, &bbox(), &img(100.0, 100.0), &LossWeights::default()).unwrap();
        assert!((l - 100.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_width_doubles_x_weight() {
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, ..LossWeights::default() };
        let p = [Vector2::new(0.1, 0.0)];
        let z = zeros2(1);
        let j = [Vector3::zeros()];
        let a = joint_loss(&j, &j, &z, &z, &p, &z, &bbox(), &img(100.0, 100.0), &w).unwrap();
        let b = joint_loss(&j, &j, &z, &z, &p, &z, &bbox(), &img(200.0, 100.0), &w).unwrap();
        assert_eq!(dynamic_weight(&bbox(), &img(200.0, 100.0))[0], 2.0 * dynamic_weight(&bbox(), &img(100.0, 100.0))[0]);
        assert!((b / a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_shape_mismatch() {
        let j = [Vector3::zeros()];
        let z = zeros2(2);
        let e = joint_loss(&j, &j, &z, &z, &z, &z, &bbox(), &img(1.0, 1.0), &LossWeights::default());
        assert!(matches!(e, Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn pseudo_focal_examples() {
        assert_eq!(pseudo_focal_loss(&[6.0], &[img(3.0, 4.0)]).unwrap(), 1.0);
        assert_eq!(pseudo_focal_loss(&[5.0], &[img(3.0, 4.0)]).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_focal_gradient() {
        let mut g = Graph::new();
        let f = g.param(Tensor::scalar(6.0));
        let ft = g.constant(Tensor::scalar(5.0));
        let l = mse_node(&mut g, f, ft);
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get(f).unwrap().data[0], 2.0 * (6.0 - 5.0));
    }

    #[test]
    fn vertex_loss_sparse_example() {
        let gt = vec![Vector3::zeros(); 24];
        let mut p = gt.clone();
        p[3].y = 0.1;
        let c = vec![Vector3::zeros(); 60];
        let v = vec![Vector3::zeros(); 120];
        let l = vertex_loss([&p, &c, &v], [&gt, &c, &v], &LossWeights::default()).unwrap();
        assert!((l - 15.0 * 0.1 / 72.0).abs() < 1e-15);
    }

    #[test]
    fn param_loss_examples() {
        let w = LossWeights::default();
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let rz = [-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(param_loss(&[1.0; 4], &[1.0; 4], &id, &id, &w).unwrap(), 0.0);
        let l = param_loss(&[2.0, 1.0, 1.0, 1.0], &[1.0; 4], &id, &id, &w).unwrap();
        assert!((l - 0.06 / 4.0).abs() < 1e-15);
        let l = param_loss(&[1.0; 4], &[1.0; 4], &id, &rz, &w).unwrap();
        assert!((l - 60.0 * 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { lambda5: -1.0, ..LossWeights::default() };
        assert_eq!(w.validate(), Err(LossError::NegativeWeight("lambda5")));
    }

    fn v3s(v: &[f64]) -> Vec<Vector3<f64>> {
        v.chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
    }

    proptest! {
        #[test]
        fn vertex_loss_permutation_invariant(a in prop::collection::vec(-1.0..1.0f64, 360), b in prop::collection::vec(-1.0..1.0f64, 360), shift in 1usize..120) {
            let (a, b) = (v3s(&a), v3s(&b));
            let rot = |v: &[Vector3<f64>]| { let mut v = v.to_vec(); v.rotate_left(shift); v };
            let w = LossWeights::default();
            let l1 = vertex_loss([&a[..24], &a[..60], &a], [&b[..24], &b[..60], &b], &w).unwrap();
            let (ra, rb) = (rot(&a), rot(&b));
            let l2 = vertex_loss([&a[..24], &a[..60], &ra], [&b[..24], &b[..60], &rb], &w).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
            prop_assert!(l1 >= 0.0);
        }

        #[test]
        fn graph_terms_match_values(a in prop::collection::vec(-2.0..2.0f64, 6), b in prop::collection::vec(-2.0..2.0f64, 6), kx in 0.5..4.0f64, ky in 0.5..4.0f64) {
            let mut g = Graph::new();
            let av = g.constant(Tensor::new(1, 6, a.clone()));
            let bv = g.constant(Tensor::new(1, 6, b.clone()));
            let wv = g.constant(Tensor::new(1, 6, vec![kx, ky, kx, ky, kx, ky]));
            let m = weighted_mse_node(&mut g, av, bv, wv);
            let l1 = l1_node(&mut g, av, bv);
            let bb = BBox { cx: 0.0, cy: 0.0, w: 10.0, h: 10.0 };
            let im = ImageSize { w: 10.0 * kx, h: 10.0 * ky };
            let pa: Vec<_> = a.chunks(2).map(|c| Vector2::new(c[0], c[1])).collect();
            let pb: Vec<_> = b.chunks(2).map(|c| Vector2::new(c[0], c[1])).collect();
            let j = vec![Vector3::zeros(); 3];
            let z = zeros2(3);
            let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, ..LossWeights::default() };
            let reference = joint_loss(&j, &j, &z, &z, &pa, &pb, &bb, &im, &w).unwrap();
            prop_assert!((g.scalar(m) - reference).abs() < 1e-12 * reference.max(1.0));
            let ref_l1 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 6.0;
            prop_assert!((g.scalar(l1) - ref_l1).abs() < 1e-12);
        }
    }
}
