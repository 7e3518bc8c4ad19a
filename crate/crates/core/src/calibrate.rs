//! Root depth (and with it the focal length) from 3D-2D joint correspondences,
//! plus the bounded head used by the learned focal predictor.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, BBox, GeometryError, ImageSize};
use crate::learn::nn::FocalNet;
use crate::learn::LearnError;
use crate::synth::SceneSample;

/// Lower end of the depth search; keeps projections away from the camera plane.
pub const TZ_MIN: f64 = 0.05;
/// Beyond this distance perspective distortion is treated as irrelevant.
pub const TZ_MAX: f64 = 10.0;
const SCAN_POINTS: usize = 200;
const GOLDEN_TOL: f64 = 1e-9;
const NEWTON_MAX: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibSolution {
    pub t_z: f64,
    pub f: f64,
    /// RMS reprojection error in full-image normalized units.
    pub residual: f64,
    pub iterations: usize,
    /// Set when the best depth sits on the search boundary.
    pub boundary: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("underdetermined: {usable} usable joints with distinct depths")]
    Underdetermined { usable: usize },
    #[error("no interior minimum, best depth {:.6} m is on the search boundary", .0.t_z)]
    NoInteriorMinimum(Box<CalibSolution>),
    #[error("expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Reprojection objective as a function of depth. With the focal length tied
/// to depth and the crop translation fixed, each joint's projected offset from
/// the principal point is `a · n · t / (z + t)`.
struct Objective {
    a: f64,
    terms: Vec<[f64; 5]>,
}

impl Objective {
    fn eval(&self, t: f64) -> (f64, f64, f64) {
        let (mut g, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for &[nx, ny, z, ox, oy] in &self.terms {
            let d = z + t;
            let q = t / d;
            let q1 = z / (d * d);
            let q2 = -2.0 * z / (d * d * d);
            for (n, o) in [(nx, ox), (ny, oy)] {
                let r = self.a * n * q - o;
                let j = self.a * n * q1;
                g += r * r;
                d1 += 2.0 * r * j;
                d2 += 2.0 * (j * j + r * self.a * n * q2);
            }
        }
        (g, d1, d2)
    }

    fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }
}

fn golden(obj: &Objective, mut lo: f64, mut hi: f64, iters: &mut usize) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (obj.value(x1), obj.value(x2));
    while hi - lo > GOLDEN_TOL * hi {
        *iters += 1;
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = obj.value(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = obj.value(x2);
        }
    }
    (lo + hi) / 2.0
}

/// Depth minimizing pixel reprojection error of `j3d` against `j2d_full`,
/// with the focal length and full-image translation following from the crop
/// camera `(s, t_xy)` at every candidate depth.
pub fn solve_tz_oracle(
    j3d: &[Vector3<f64>],
    j2d_full: &[Vector2<f64>],
    bbox: &BBox,
    img: &ImageSize,
    s: f64,
    t_xy: &Vector2<f64>,
) -> Result<CalibSolution, CalibError> {
    if j3d.len() != j2d_full.len() {
        return Err(CalibError::ShapeMismatch { expected: j3d.len(), got: j2d_full.len() });
    }
    let tb = geometry::crop_to_full_translation(t_xy, bbox, img, s)?;
    let c = img.center();
    let terms: Vec<[f64; 5]> = j3d
        .iter()
        .zip(j2d_full)
        .filter(|(p, x)| p.iter().chain(x.iter()).all(|v| v.is_finite()))
        .map(|(p, x)| [p.x + tb.x, p.y + tb.y, p.z, x.x - c.x, x.y - c.y])
        .collect();
    let zmin = terms.iter().map(|t| t[2]).fold(f64::INFINITY, f64::min);
    let zmax = terms.iter().map(|t| t[2]).fold(f64::NEG_INFINITY, f64::max);
    if terms.len() < 2 || !(zmax - zmin > 1e-9) {
        let usable = if terms.len() < 2 { terms.len() } else { 1 };
        return Err(CalibError::Underdetermined { usable });
    }
    let obj = Objective { a: s * bbox.h / 2.0, terms };

    let lo = TZ_MIN.max(TZ_MIN - zmin);
    let hi = TZ_MAX;
    if lo >= hi {
        return Err(CalibError::Underdetermined { usable: 0 });
    }
    let grid: Vec<f64> =
        (0..SCAN_POINTS).map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (SCAN_POINTS - 1) as f64).exp()).collect();
    let best = (0..SCAN_POINTS)
        .map(|k| (k, obj.value(grid[k])))
        .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
    let k = best.0;
    let mut iterations = SCAN_POINTS;
    let (a, b) = (grid[k.saturating_sub(1)], grid[(k + 1).min(SCAN_POINTS - 1)]);
    let mut t = golden(&obj, a, b, &mut iterations);
    for _ in 0..NEWTON_MAX {
        let (_, d1, d2) = obj.eval(t);
        if !(d2 > 0.0) {
            break;
        }
        let next = (t - d1 / d2).clamp(a, b);
        iterations += 1;
        let step = (next - t).abs();
        t = next;
        if step <= 1e-15 * t {
            break;
        }
    }
    let (_, d1, _) = obj.eval(t);
    let at_lo = (t - lo).abs() <= GOLDEN_TOL * hi && d1 >= 0.0;
    let at_hi = (hi - t).abs() <= GOLDEN_TOL * hi && d1 <= 0.0;
    if at_lo {
        t = lo;
    } else if at_hi {
        t = hi;
    }

    let mut sq = 0.0;
    for &[nx, ny, z, ox, oy] in &obj.terms {
        let q = t / (z + t);
        sq += (2.0 * (obj.a * nx * q - ox) / img.w).powi(2) + (2.0 * (obj.a * ny * q - oy) / img.h).powi(2);
    }
    let sol = CalibSolution {
        t_z: t,
        f: geometry::focal_from_depth(s, bbox.h, t)?,
        residual: (sq / (2 * obj.terms.len()) as f64).sqrt(),
        iterations,
        boundary: at_lo || at_hi,
    };
    if sol.boundary {
        Err(CalibError::NoInteriorMinimum(Box::new(sol)))
    } else {
        Ok(sol)
    }
}

/// Oracle on a stored scene, using its 3D joints and crop camera labels
/// against the observed 2D joints.
pub fn solve_scene(scene: &SceneSample) -> Result<CalibSolution, CalibError> {
    let wc = scene.weak_cam;
    solve_tz_oracle(
        &scene.joints3d(),
        &scene.joints2d_observed(),
        &scene.bbox,
        &scene.image,
        wc.s,
        &Vector2::new(wc.t_x, wc.t_y),
    )
}

/// Bounded depth from a raw activation: `10 · sigmoid(raw)`.
pub fn focal_head(raw: f64) -> f64 {
    TZ_MAX * sigmoid(raw)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Depth and focal length from the focal predictor, with the crop scale `s`
/// and bbox height `h_bbox` supplying the depth-to-focal relation.
pub fn predict_focal(features: &[f64], weights: &FocalNet, s: f64, h_bbox: f64) -> Result<(f64, f64), LearnError> {
    let t_z = weights.predict(features)?;
    let f = geometry::focal_from_depth(s, h_bbox, t_z).map_err(|e| LearnError::Invalid(e.to_string()))?;
    Ok((t_z, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BodyTranslation, CameraIntrinsics};
    use crate::synth::{self, SynthConfig};

    fn objective_px(scene: &SceneSample, t: f64) -> f64 {
        let wc = scene.weak_cam;
        let f = geometry::focal_from_depth(wc.s, scene.bbox.h, t).unwrap();
        let k = CameraIntrinsics::centered(f, scene.image).unwrap();
        let tb = geometry::crop_to_full_translation(&Vector2::new(wc.t_x, wc.t_y), &scene.bbox, &scene.image, wc.s).unwrap();
        let tb = BodyTranslation::new(tb.x, tb.y, t).unwrap();
        scene
            .joints3d()
            .iter()
            .zip(scene.joints2d_observed())
            .map(|(p, x)| (geometry::project_perspective(p, &tb, &k).unwrap() - x).norm_squared())
            .sum()
    }

    #[test]
    fn recovers_exact_depth() {
        let cfg = SynthConfig { n: 50, seed: 4, pixel_noise: 0.0, tz_min: 3.0, tz_max: 3.0, ..Default::default() };
        for s in synth::generate(&cfg).unwrap() {
            let sol = solve_scene(&s).unwrap();
            assert!((sol.t_z - 3.0).abs() < 1e-6, "{}", sol.t_z);
            assert!(sol.residual < 1e-9);
            assert!((sol.f - s.intrinsics.f).abs() / s.intrinsics.f < 1e-6);
        }
    }

    #[test]
    fn optimality_certificate_under_noise() {
        let cfg = SynthConfig { n: 100, seed: 8, pixel_noise: 1.0, ..Default::default() };
        for s in synth::generate(&cfg).unwrap() {
            match solve_scene(&s) {
                Ok(sol) => {
                    let h = 1e-6;
                    // Objective in image-diagonal units: same minimizer, and the
                    // central difference stays accurate where curvature is large.
                    let diag2 = s.image.w.powi(2) + s.image.h.powi(2);
                    let d = (objective_px(&s, sol.t_z + h) - objective_px(&s, sol.t_z - h)) / (2.0 * h * diag2);
                    assert!(d.abs() < 1e-6, "derivative {d} at {}", sol.t_z);
                }
                Err(CalibError::NoInteriorMinimum(sol)) => assert!(sol.boundary),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn noisy_median_error_is_small() {
        let cfg = SynthConfig { n: 100, seed: 21, pixel_noise: 1.0, focal_px: Some(600.0), ..Default::default() };
        let mut errs: Vec<f64> = synth::generate(&cfg)
            .unwrap()
            .iter()
            .map(|s| {
                let t = match solve_scene(s) {
                    Ok(sol) => sol.t_z,
                    Err(CalibError::NoInteriorMinimum(sol)) => sol.t_z,
                    Err(e) => panic!("{e}"),
                };
                (t - s.t_b.z).abs() / s.t_b.z
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = (errs[49] + errs[50]) / 2.0;
        assert!(median < 0.05, "median {median}");
    }

    #[test]
    fn planar_body_is_underdetermined() {
        let cfg = SynthConfig { n: 1, seed: 2, ..Default::default() };
        let mut s = synth::generate(&cfg).unwrap().remove(0);
        for p in s.joints_3d.iter_mut() {
            p[2] = 0.0;
        }
        assert!(matches!(solve_scene(&s), Err(CalibError::Underdetermined { .. })));
        let one = solve_tz_oracle(&s.joints3d()[..1], &s.joints2d_observed()[..1], &s.bbox, &s.image, 1.0, &Vector2::zeros());
        assert!(matches!(one, Err(CalibError::Underdetermined { usable: 1 })));
    }

    #[test]
    fn far_truth_is_flagged_at_boundary() {
        let cfg = SynthConfig { n: 1, seed: 2, pixel_noise: 0.0, tz_min: 9.9, tz_max: 9.9, ..Default::default() };
        let mut s = synth::generate(&cfg).unwrap().remove(0);
        // Flatten the observation to the weak-perspective limit: the best depth runs off to infinity.
        let t = Vector2::new(s.weak_cam.t_x, s.weak_cam.t_y);
        let weak: Vec<_> = s.joints3d().iter().map(|p| geometry::from_crop(&geometry::project_weak(p, s.weak_cam.s, &t), &s.bbox)).collect();
        s.joints_2d_observed = weak.iter().map(|p| [p.x, p.y]).collect();
        match solve_scene(&s) {
            Err(CalibError::NoInteriorMinimum(sol)) => assert_eq!(sol.t_z, TZ_MAX),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn head_examples() {
        assert_eq!(focal_head(0.0), 5.0);
        assert!(focal_head(20.0) < 10.0 && focal_head(20.0) > 9.9999);
        assert!(focal_head(-800.0) >= 0.0);
        let h = 1e-6;
        let d = (focal_head(h) - focal_head(-h)) / (2.0 * h);
        assert!((d - 2.5).abs() < 1e-9);
    }
}
