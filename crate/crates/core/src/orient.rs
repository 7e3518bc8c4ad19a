//! World orientation correction and rotation utilities.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry;
use crate::learn::model::ORIENT_INPUT;
use crate::learn::nn::Mlp;
use crate::learn::Tensor;
use crate::so3;
use crate::synth::{SceneSample, FEATURE_LEN};

/// Tolerance on the orthogonality defect of input rotations.
pub const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrientError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{what} is not a rotation (orthogonality defect {defect:e})")]
    InvalidRotation { what: &'static str, defect: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientInput {
    pub phi: Vec<f64>,
    pub glob: [f64; 5],
    /// Pseudo camera rotation.
    pub r_c: Matrix3<f64>,
    /// Camera-frame body orientation.
    pub r_b_cam: Matrix3<f64>,
}

impl OrientInput {
    pub fn new(phi: Vec<f64>, glob: [f64; 5], r_c: Matrix3<f64>, r_b_cam: Matrix3<f64>) -> Result<Self, OrientError> {
        if phi.len() != FEATURE_LEN {
            return Err(OrientError::ShapeMismatch { what: "features", expected: FEATURE_LEN, got: phi.len() });
        }
        for (what, r) in [("camera rotation", &r_c), ("camera-frame orientation", &r_b_cam)] {
            let defect = so3::orthogonality_defect(r);
            if !so3::is_rotation(r, ROTATION_TOL) {
                return Err(OrientError::InvalidRotation { what, defect });
            }
        }
        Ok(Self { phi, glob, r_c, r_b_cam })
    }

    /// Inputs for a scene, with its pseudo camera rotation and a given camera-frame orientation.
    pub fn from_scene(scene: &SceneSample, r_b_cam: Matrix3<f64>) -> Result<Self, OrientError> {
        Self::new(scene.features.clone(), geometry::glob_info(&scene.bbox, &scene.image), scene.rc_noisy(), r_b_cam)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(ORIENT_INPUT);
        v.extend_from_slice(&self.phi);
        v.extend_from_slice(&self.glob);
        v.extend_from_slice(&so3::flatten(&self.r_c));
        v.extend_from_slice(&so3::flatten(&self.r_b_cam));
        v
    }
}

/// `R_b = R_b^c + FC(φ, glob, R_c, R_b^c)`, entrywise. The sum is not
/// projected; see [`project_to_so3`].
pub fn orient_correct(input: &OrientInput, weights: &Mlp) -> Result<Matrix3<f64>, OrientError> {
    if weights.input_dim() != ORIENT_INPUT || weights.output_dim() != 9 {
        return Err(OrientError::ShapeMismatch { what: "orient weights", expected: ORIENT_INPUT, got: weights.input_dim() });
    }
    let delta = weights
        .eval(&Tensor::row_vector(input.to_vec()))
        .map_err(|_| OrientError::ShapeMismatch { what: "orient input", expected: ORIENT_INPUT, got: input.to_vec().len() })?;
    Ok(input.r_b_cam + so3::unflatten(&delta.data))
}

/// Nearest rotation in Frobenius norm, via SVD with the determinant sign fixed.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>, OrientError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(OrientError::Singular);
    }
    let svd = m.svd(true, true);
    let sv = svd.singular_values;
    if sv.min() <= 1e-12 * sv.max().max(f64::MIN_POSITIVE) {
        return Err(OrientError::Singular);
    }
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (u * vt).determinant().signum();
    Ok(u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt)
}

/// Rotation angle of `R1ᵀ R2`, radians.
pub fn geodesic_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    let c = (((r1.transpose() * r2).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}

/// `R_c⁻¹ · R_b^c`: the world orientation implied by a camera rotation estimate.
pub fn naive_world_orientation(r_c: &Matrix3<f64>, r_b_cam: &Matrix3<f64>) -> Matrix3<f64> {
    r_c.transpose() * r_b_cam
}

/// `y ≈ scale · R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub r: Matrix3<f64>,
    pub scale: f64,
    pub t: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.r * p) + self.t
    }
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Least-squares similarity taking `x` onto `y` (Umeyama), with a proper
/// rotation. Returns the transform and the aligned `x`.
pub fn procrustes_align(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<(Similarity, Vec<Vector3<f64>>), OrientError> {
    if x.len() != y.len() {
        return Err(OrientError::ShapeMismatch { what: "point sets", expected: x.len(), got: y.len() });
    }
    if x.len() < 3 {
        return Err(OrientError::DegenerateConfiguration("fewer than 3 points"));
    }
    let (mx, my) = (centroid(x), centroid(y));
    let n = x.len() as f64;
    let mut cov = Matrix3::zeros();
    let mut sxx = Matrix3::zeros();
    for (p, q) in x.iter().zip(y) {
        let (a, b) = (p - mx, q - my);
        cov += b * a.transpose();
        sxx += a * a.transpose();
    }
    cov /= n;
    sxx /= n;
    let spread = sxx.symmetric_eigenvalues();
    let mut ev: Vec<f64> = spread.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[1] > 1e-12 * ev[2].max(f64::MIN_POSITIVE)) {
        return Err(OrientError::DegenerateConfiguration("points are collinear"));
    }
    let var_x = sxx.trace();
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = (u.determinant() * vt.determinant()).signum();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * s * vt;
    let scale = (svd.singular_values.component_mul(&Vector3::new(1.0, 1.0, d))).sum() / var_x;
    let t = my - scale * (r * mx);
    let sim = Similarity { r, scale, t };
    let aligned = x.iter().map(|p| sim.apply(p)).collect();
    Ok((sim, aligned))
}
