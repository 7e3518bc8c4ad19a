//! Pinhole camera math.
//!
//! 3D quantities are meters in the camera frame (x right, y down, z forward),
//! 2D quantities are pixels unless a function says otherwise. The crop frame is
//! a square of side `h_bbox` centred on the bbox centre, mapped to [-1, 1].

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3;

/// Body extent assumed when relating focal length to depth.
pub const BODY_RANGE_M: f64 = 2.0;
/// Projection refuses points closer than this to the camera plane.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is within the depth guard")]
    DegenerateDepth(f64),
    #[error("{0} must be positive, got {1}")]
    NonPositiveInput(&'static str, f64),
    #[error("matrix is not a rotation (orthogonality defect {0:.3e})")]
    InvalidRotation(f64),
}

fn positive(name: &'static str, v: f64) -> Result<f64, GeometryError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(GeometryError::NonPositiveInput(name, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        positive("f", f)?;
        Ok(Self { f, cx, cy })
    }

    /// Principal point at the image centre.
    pub fn centered(f: f64, img: ImageSize) -> Result<Self, GeometryError> {
        Self::new(f, img.w / 2.0, img.h / 2.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.f, 0.0, self.cx, 0.0, self.f, self.cy, 0.0, 0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// World to camera rotation.
    pub r_c: Matrix3<f64>,
    pub t_c: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(r_c: Matrix3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&r_c)?;
        Ok(Self { r_c, t_c: Vector3::zeros() })
    }
}

impl Default for CameraExtrinsics {
    fn default() -> Self {
        Self { r_c: Matrix3::identity(), t_c: Vector3::zeros() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub h: f64,
    pub w: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, h: f64, w: f64) -> Result<Self, GeometryError> {
        positive("h_bbox", h)?;
        positive("w_bbox", w)?;
        Ok(Self { cx, cy, h, w })
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.cx, self.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub w: f64,
    pub h: f64,
}

impl ImageSize {
    pub fn new(w: f64, h: f64) -> Result<Self, GeometryError> {
        positive("W", w)?;
        positive("H", h)?;
        Ok(Self { w, h })
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.w / 2.0, self.h / 2.0)
    }
}

/// Root translation of the body relative to the camera, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyTranslation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BodyTranslation {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        positive("t_b^z", z)?;
        Ok(Self { x, y, z })
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Pinhole projection of `p + t_b`.
pub fn project_perspective(
    p: &Vector3<f64>,
    t_b: &BodyTranslation,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    let z = p.z + t_b.z;
    if !(z > DEPTH_EPS) {
        return Err(GeometryError::DegenerateDepth(z));
    }
    Ok(Vector2::new(k.f * (p.x + t_b.x) / z + k.cx, k.f * (p.y + t_b.y) / z + k.cy))
}

/// Weak perspective: depth is dropped, result is in crop-normalized units.
pub fn project_weak(p: &Vector3<f64>, s: f64, t: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(s * (p.x + t.x), s * (p.y + t.y))
}

pub fn focal_from_depth(s: f64, h_bbox: f64, t_z: f64) -> Result<f64, GeometryError> {
    Ok(positive("s", s)? * positive("h_bbox", h_bbox)? * positive("t_z", t_z)? / BODY_RANGE_M)
}

pub fn depth_from_focal(s: f64, h_bbox: f64, f: f64) -> Result<f64, GeometryError> {
    Ok(BODY_RANGE_M * positive("f", f)? / (positive("s", s)? * positive("h_bbox", h_bbox)?))
}

/// Crop-frame translation to full-image body translation (x, y).
pub fn crop_to_full_translation(
    t: &Vector2<f64>,
    bbox: &BBox,
    img: &ImageSize,
    s: f64,
) -> Result<Vector2<f64>, GeometryError> {
    let sh = positive("s*h_bbox", s * bbox.h)?;
    Ok(Vector2::new(t.x + (2.0 * bbox.cx - img.w) / sh, t.y + (2.0 * bbox.cy - img.h) / sh))
}

/// Inverse of [`crop_to_full_translation`].
pub fn full_to_crop_translation(
    t_b: &Vector2<f64>,
    bbox: &BBox,
    img: &ImageSize,
    s: f64,
) -> Result<Vector2<f64>, GeometryError> {
    let sh = positive("s*h_bbox", s * bbox.h)?;
    Ok(Vector2::new(t_b.x - (2.0 * bbox.cx - img.w) / sh, t_b.y - (2.0 * bbox.cy - img.h) / sh))
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if so3::is_rotation(r, 1e-9) {
        Ok(())
    } else {
        Err(GeometryError::InvalidRotation(so3::orthogonality_defect(r)))
    }
}

pub fn world_from_camera(r_c: &Matrix3<f64>, x_cam: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    check_rotation(r_c)?;
    Ok(r_c.transpose() * x_cam)
}

pub fn camera_from_world(r_c: &Matrix3<f64>, x_world: &Vector3<f64>) -> Result<Vector3<f64>, GeometryError> {
    check_rotation(r_c)?;
    Ok(r_c * x_world)
}

/// f̃, the image diagonal.
pub fn normalization_focal(img: &ImageSize) -> f64 {
    img.w.hypot(img.h)
}

pub fn glob_info(bbox: &BBox, img: &ImageSize) -> [f64; 5] {
    let ft = normalization_focal(img);
    [
        (bbox.cx - img.w / 2.0) / ft,
        (bbox.cy - img.h / 2.0) / ft,
        bbox.h / ft,
        img.w / ft,
        img.h / ft,
    ]
}

/// Full-image pixels to crop-normalized coordinates.
pub fn to_crop(px: &Vector2<f64>, bbox: &BBox) -> Vector2<f64> {
    let half = bbox.h / 2.0;
    Vector2::new((px.x - bbox.cx) / half, (px.y - bbox.cy) / half)
}

pub fn from_crop(uv: &Vector2<f64>, bbox: &BBox) -> Vector2<f64> {
    let half = bbox.h / 2.0;
    Vector2::new(uv.x * half + bbox.cx, uv.y * half + bbox.cy)
}

/// Full-image pixels to [-1, 1] per axis.
pub fn to_full_normalized(px: &Vector2<f64>, img: &ImageSize) -> Vector2<f64> {
    Vector2::new(2.0 * px.x / img.w - 1.0, 2.0 * px.y / img.h - 1.0)
}

/// Full-perspective projection written directly in crop coordinates, with the
/// focal length tied to `t_z` and the body translation given in crop terms.
/// Reduces to [`project_weak`] when the point has zero depth offset.
pub fn crop_frame_projection(
    p: &Vector3<f64>,
    t: &Vector2<f64>,
    t_z: f64,
    bbox: &BBox,
    img: &ImageSize,
    s: f64,
) -> Result<Vector2<f64>, GeometryError> {
    let d = p.z + t_z;
    if !(d > DEPTH_EPS) {
        return Err(GeometryError::DegenerateDepth(d));
    }
    let ox = (2.0 * bbox.cx - img.w) / bbox.h;
    let oy = (2.0 * bbox.cy - img.h) / bbox.h;
    Ok(Vector2::new(
        (s * t_z * (p.x + t.x) - ox * p.z) / d,
        (s * t_z * (p.y + t.y) - oy * p.z) / d,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

    fn k0(f: f64) -> CameraIntrinsics {
        CameraIntrinsics::new(f, 0.0, 0.0).unwrap()
    }

    #[test]
    fn perspective_examples() {
        let on_axis = project_perspective(&Vector3::zeros(), &BodyTranslation::new(0.0, 0.0, 5.0).unwrap(), &k0(1000.0));
        assert_eq!(on_axis.unwrap(), Vector2::zeros());
        let p = project_perspective(
            &Vector3::new(1.0, 0.0, 0.0),
            &BodyTranslation::new(0.0, 0.0, 2.0).unwrap(),
            &k0(100.0),
        )
        .unwrap();
        assert_eq!(p, Vector2::new(50.0, 0.0));
    }

    #[test]
    fn perspective_matches_k_matrix() {
        let k = CameraIntrinsics::new(812.0, 300.5, 211.25).unwrap();
        let p = Vector3::new(0.3, -0.4, 0.2);
        let t = BodyTranslation::new(0.1, 0.05, 3.0).unwrap();
        let h = k.matrix() * (p + t.vector());
        let expected = Vector2::new(h.x / h.z, h.y / h.z);
        let got = project_perspective(&p, &t, &k).unwrap();
        assert!((got - expected).norm() < 1e-9);
    }

    #[test]
    fn depth_guard() {
        let t = BodyTranslation::new(0.0, 0.0, 1.0).unwrap();
        let err = project_perspective(&Vector3::new(0.0, 0.0, -1.0), &t, &k0(10.0)).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateDepth(_)));
    }

    #[test]
    fn large_focal_approaches_weak() {
        let img = ImageSize::new(1000.0, 800.0).unwrap();
        let bbox = BBox::new(500.0, 400.0, 200.0, 150.0).unwrap();
        let (s, f) = (1.0, 1e8);
        let tz = 2.0 * f / (s * bbox.h);
        let t = Vector2::new(0.1, -0.2);
        let k = CameraIntrinsics::centered(f, img).unwrap();
        let tb = crop_to_full_translation(&t, &bbox, &img, s).unwrap();
        let tb = BodyTranslation::new(tb.x, tb.y, tz).unwrap();
        for p in [Vector3::new(0.5, -0.3, 0.9), Vector3::new(-1.0, 1.0, -1.0), Vector3::new(0.2, 0.7, 0.0)] {
            let persp = project_perspective(&p, &tb, &k).unwrap();
            let weak = from_crop(&project_weak(&p, s, &t), &bbox);
            assert!((persp - weak).norm() < 1e-3);
        }
    }

    #[test]
    fn weak_examples() {
        assert_eq!(project_weak(&Vector3::new(0.0, 0.0, 7.0), 1.0, &Vector2::zeros()), Vector2::zeros());
        let p = project_weak(&Vector3::new(0.5, -0.5, 3.0), 2.0, &Vector2::new(0.1, 0.0));
        assert!((p - Vector2::new(1.2, -1.0)).norm() < 1e-15);
        assert_eq!(project_weak(&Vector3::new(4.0, -2.0, 1.0), 0.0, &Vector2::new(0.3, 0.3)), Vector2::zeros());
    }

    #[test]
    fn focal_depth_examples() {
        assert_eq!(focal_from_depth(1.0, 224.0, 2.0).unwrap(), 224.0);
        assert_eq!(focal_from_depth(2.0, 100.0, 5.0).unwrap(), 500.0);
        assert!((depth_from_focal(1.0, 224.0, 5000.0).unwrap() - 44.642857).abs() < 1e-6);
        assert_eq!(depth_from_focal(1.0, 224.0, 224.0).unwrap(), 2.0);
        assert!(matches!(focal_from_depth(0.0, 1.0, 1.0), Err(GeometryError::NonPositiveInput(..))));
        assert!(matches!(depth_from_focal(1.0, -3.0, 1.0), Err(GeometryError::NonPositiveInput(..))));
    }

    #[test]
    fn translation_examples() {
        let img = ImageSize::new(1000.0, 800.0).unwrap();
        let centred = BBox::new(500.0, 400.0, 200.0, 100.0).unwrap();
        let t = Vector2::new(0.3, -0.7);
        assert_eq!(crop_to_full_translation(&t, &centred, &img, 1.5).unwrap(), t);
        let bbox = BBox::new(600.0, 400.0, 200.0, 100.0).unwrap();
        assert_eq!(crop_to_full_translation(&Vector2::zeros(), &bbox, &img, 1.0).unwrap(), Vector2::new(1.0, 0.0));
        let s = 1.25;
        let a = crop_to_full_translation(&t, &bbox, &img, s).unwrap();
        let shifted = BBox { cx: bbox.cx + s * bbox.h / 2.0, ..bbox };
        let b = crop_to_full_translation(&t, &shifted, &img, s).unwrap();
        assert!((b.x - a.x - 1.0).abs() < 1e-12);
        assert_eq!(b.y, a.y);
        assert!(crop_to_full_translation(&t, &bbox, &img, 0.0).is_err());
    }

    #[test]
    fn frame_examples() {
        let x = Vector3::new(0.2, -1.0, 3.0);
        assert_eq!(world_from_camera(&Matrix3::identity(), &x).unwrap(), x);
        // 90° pitch: camera x-rotation maps world +y to camera +z, so camera +z is world +y.
        let r = so3::rot_x(std::f64::consts::FRAC_PI_2);
        let w = world_from_camera(&r, &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((w - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
        let bad = Matrix3::identity() * 1.1;
        assert!(matches!(world_from_camera(&bad, &x), Err(GeometryError::InvalidRotation(_))));
    }

    #[test]
    fn normalization_examples() {
        let ft = normalization_focal(&ImageSize::new(1000.0, 1000.0).unwrap());
        assert!((ft - 1000.0 * SQRT_2).abs() < 1e-9);
        assert!((ft - 1414.2136).abs() < 1e-4);
        assert_eq!(normalization_focal(&ImageSize::new(3.0, 4.0).unwrap()), 5.0);
        let hd = normalization_focal(&ImageSize::new(1920.0, 1080.0).unwrap());
        assert!((hd - 2202.9071).abs() < 1e-4);
    }

    #[test]
    fn glob_examples() {
        let img = ImageSize::new(1000.0, 1000.0).unwrap();
        let g = glob_info(&BBox::new(500.0, 500.0, 300.0, 200.0).unwrap(), &img);
        assert_eq!((g[0], g[1]), (0.0, 0.0));
        let g = glob_info(&BBox::new(600.0, 500.0, 200.0, 100.0).unwrap(), &img);
        let d = 1000.0 * SQRT_2;
        let expected = [100.0 / d, 0.0, 200.0 / d, FRAC_1_SQRT_2, FRAC_1_SQRT_2];
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // Scaling every pixel quantity leaves the vector unchanged.
        let img2 = ImageSize::new(3000.0, 3000.0).unwrap();
        let g2 = glob_info(&BBox::new(1800.0, 1500.0, 600.0, 300.0).unwrap(), &img2);
        for (a, b) in g.iter().zip(g2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn eq4_setup(cx: f64, cy: f64, h: f64) -> (ImageSize, BBox) {
        (ImageSize::new(1280.0, 720.0).unwrap(), BBox::new(cx, cy, h, 0.8 * h).unwrap())
    }

    proptest! {
        #[test]
        fn focal_depth_roundtrip(s in 0.01f64..10.0, h in 1.0f64..4000.0, tz in 0.01f64..100.0) {
            let back = depth_from_focal(s, h, focal_from_depth(s, h, tz).unwrap()).unwrap();
            prop_assert!((back - tz).abs() / tz < 1e-12);
        }

        #[test]
        fn rotation_preserves_norm(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
                                   x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
            let r = so3::exp_map(&Vector3::new(a, b, c));
            let v = Vector3::new(x, y, z);
            let w = world_from_camera(&r, &v).unwrap();
            prop_assert!((w.norm() - v.norm()).abs() < 1e-12);
            let back = camera_from_world(&r, &w).unwrap();
            prop_assert!((back - v).norm() < 1e-12);
        }

        #[test]
        fn eq4_consistency(cx in 100.0f64..1180.0, cy in 80.0f64..640.0, h in 50.0f64..600.0,
                           s in 0.3f64..3.0, tz in 0.5f64..10.0, tbx in -1.0f64..1.0, tby in -1.0f64..1.0,
                           seed in 0u64..1000) {
            let (img, bbox) = eq4_setup(cx, cy, h);
            let f = focal_from_depth(s, bbox.h, tz).unwrap();
            let k = CameraIntrinsics::centered(f, img).unwrap();
            let tb = BodyTranslation::new(tbx, tby, tz).unwrap();
            let t = full_to_crop_translation(&Vector2::new(tbx, tby), &bbox, &img, s).unwrap();
            let mut state = seed;
            for _ in 0..16 {
                let mut next = || {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                };
                let p = Vector3::new(next(), next(), 0.8 * next());
                let full = project_perspective(&p, &tb, &k).unwrap();
                let via_affine = from_crop(&to_crop(&full, &bbox), &bbox);
                let direct = from_crop(&crop_frame_projection(&p, &t, tz, &bbox, &img, s).unwrap(), &bbox);
                prop_assert!((via_affine - direct).norm() < 1e-9);
            }
        }

        #[test]
        fn translation_roundtrip(tx in -3.0f64..3.0, ty in -3.0f64..3.0, cx in 0.0f64..1280.0, s in 0.2f64..4.0) {
            let (img, bbox) = eq4_setup(cx, 300.0, 250.0);
            let t = Vector2::new(tx, ty);
            let back = full_to_crop_translation(&crop_to_full_translation(&t, &bbox, &img, s).unwrap(), &bbox, &img, s).unwrap();
            prop_assert!((back - t).norm() < 1e-12);
        }
    }

    #[test]
    fn weak_limit_is_monotone() {
        let img = ImageSize::new(1280.0, 720.0).unwrap();
        let bbox = BBox::new(800.0, 300.0, 240.0, 200.0).unwrap();
        let (s, t) = (1.1, Vector2::new(0.05, -0.1));
        let pts = [Vector3::new(0.6, -0.5, 0.6), Vector3::new(-0.3, 0.4, -0.8), Vector3::new(0.1, 0.9, 0.3)];
        for p in pts {
            let weak = from_crop(&project_weak(&p, s, &t), &bbox);
            let mut prev = f64::INFINITY;
            for tz in [2.0, 10.0, 100.0, 1e4] {
                let f = focal_from_depth(s, bbox.h, tz).unwrap();
                let k = CameraIntrinsics::centered(f, img).unwrap();
                let tb = crop_to_full_translation(&t, &bbox, &img, s).unwrap();
                let full = project_perspective(&p, &BodyTranslation::new(tb.x, tb.y, tz).unwrap(), &k).unwrap();
                let gap = (full - weak).norm();
                assert!(gap < prev, "gap {gap} did not shrink at tz {tz}");
                prev = gap;
            }
            assert!(prev < 0.05);
        }
    }
}
