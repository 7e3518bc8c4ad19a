//! SO(3) helpers: hat operator, exponential and log maps, axis rotations.

use nalgebra::{Matrix3, Vector3};

/// Below this angle the exponential map switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula.
pub fn exp_map(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = hat(w);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Inverse of [`exp_map`], returning a rotation vector with norm in [0, π].
pub fn log_map(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let v = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        return 0.5 * v;
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return v * (theta / (2.0 * theta.sin()));
    }
    // Near π the antisymmetric part vanishes; read the axis off the symmetric part.
    let b = (r + Matrix3::identity()) * 0.5;
    let mut col = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(col, col)] {
            col = i;
        }
    }
    let mut axis: Vector3<f64> = b.column(col).into();
    axis /= axis.norm();
    if axis.dot(&v) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Frobenius norm of RᵀR − I.
pub fn orthogonality_defect(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).norm()
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite()) && orthogonality_defect(r) <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Row-major flattening, matching the layout used by the autodiff tensors.
pub fn flatten(r: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = r[(i, j)];
        }
    }
    out
}

pub fn unflatten(v: &[f64]) -> Matrix3<f64> {
    Matrix3::from_row_slice(&v[..9])
}

pub fn to_rows(r: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
    ]
}

pub fn from_rows(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn exp_of_axis_rotations() {
        let a = 0.7;
        assert!((exp_map(&Vector3::new(a, 0.0, 0.0)) - rot_x(a)).norm() < 1e-15);
        assert!((exp_map(&Vector3::new(0.0, a, 0.0)) - rot_y(a)).norm() < 1e-15);
        assert!((exp_map(&Vector3::new(0.0, 0.0, a)) - rot_z(a)).norm() < 1e-15);
    }

    #[test]
    fn half_turn_about_z() {
        let r = exp_map(&Vector3::new(0.0, 0.0, PI));
        let expected = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expected).norm() < 1e-15);
        let w = log_map(&r);
        assert!((w.norm() - PI).abs() < 1e-12);
        assert!((exp_map(&w) - r).norm() < 1e-12);
    }

    #[test]
    fn tiny_angle_stays_finite() {
        let r = exp_map(&Vector3::new(1e-12, -2e-12, 0.0));
        assert!(is_rotation(&r, 1e-12));
    }

    proptest! {
        #[test]
        fn log_inverts_exp(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, ang in 0.0f64..3.1) {
            let axis = Vector3::new(x, y, z);
            prop_assume!(axis.norm() > 1e-3);
            let w = axis.normalize() * ang;
            let r = exp_map(&w);
            prop_assert!(orthogonality_defect(&r) < 1e-12);
            prop_assert!((log_map(&r) - w).norm() < 1e-9);
        }

        #[test]
        fn flatten_roundtrip(x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0) {
            let r = exp_map(&Vector3::new(x, y, z));
            prop_assert_eq!(unflatten(&flatten(&r)), r);
            prop_assert_eq!(from_rows(&to_rows(&r)), r);
        }
    }
}
