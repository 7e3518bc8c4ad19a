//! Camera- and world-frame evaluation metrics. Inputs in meters, outputs in millimeters.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learn::model::{matrix_rows, Prediction};
use crate::orient::{self, OrientError};
use crate::skeleton;
use crate::synth::SceneSample;

const MM: f64 = 1000.0;
/// Joint used for root alignment.
pub const ROOT: usize = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty point set")]
    Empty,
    #[error(transparent)]
    Orient(#[from] OrientError),
}

fn check(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn mean_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64 * MM
}

/// Mean per-joint position error. With `align_root` both sets are first
/// translated so joint [`ROOT`] sits at the origin.
pub fn mpjpe(gt: &[Vector3<f64>], pred: &[Vector3<f64>], align_root: bool) -> Result<f64, MetricsError> {
    check(gt, pred)?;
    if align_root {
        let (g0, p0) = (gt[ROOT], pred[ROOT]);
        let g: Vec<_> = gt.iter().map(|p| p - g0).collect();
        let q: Vec<_> = pred.iter().map(|p| p - p0).collect();
        return Ok(mean_distance(&g, &q));
    }
    Ok(mean_distance(gt, pred))
}

/// MPJPE after the best similarity transform of the prediction onto the ground truth.
pub fn pa_mpjpe(gt: &[Vector3<f64>], pred: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    check(gt, pred)?;
    let (_, aligned) = orient::procrustes_align(pred, gt)?;
    Ok(mean_distance(gt, &aligned))
}

/// Mean per-vertex error, no alignment.
pub fn pve(gt: &[Vector3<f64>], pred: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    check(gt, pred)?;
    Ok(mean_distance(gt, pred))
}

/// World-frame joint and vertex errors `(W-MPJPE, W-PVE)`.
pub fn w_metrics(
    gt_joints: &[Vector3<f64>],
    pred_joints: &[Vector3<f64>],
    gt_vertices: &[Vector3<f64>],
    pred_vertices: &[Vector3<f64>],
) -> Result<(f64, f64), MetricsError> {
    Ok((mpjpe(gt_joints, pred_joints, false)?, pve(gt_vertices, pred_vertices)?))
}

/// Rotates camera-frame points into the world frame implied by a camera-frame
/// body orientation `r_b_cam` and a world body orientation `r_b`.
pub fn to_world(points: &[Vector3<f64>], r_b: &Matrix3<f64>, r_b_cam: &Matrix3<f64>) -> Vec<Vector3<f64>> {
    let m = r_b * r_b_cam.transpose();
    points.iter().map(|p| m * p).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub index: u64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub w_mpjpe: f64,
    pub w_pve: f64,
    /// Geodesic error of the world body orientation, degrees.
    pub orientation_deg: f64,
    /// `|t_z − t_z*| / t_z*`.
    pub depth_rel_err: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub w_mpjpe: f64,
    pub w_pve: f64,
    pub orientation_deg: f64,
    pub depth_median_rel_err: f64,
    pub count: usize,
}

/// Metrics of one world-orientation method over a scene set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub summary: Summary,
    pub samples: Vec<SampleMetrics>,
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl EvalReport {
    pub fn new(method: impl Into<String>, samples: Vec<SampleMetrics>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let summary = Summary {
            mpjpe: mean(|s| s.mpjpe),
            pa_mpjpe: mean(|s| s.pa_mpjpe),
            pve: mean(|s| s.pve),
            w_mpjpe: mean(|s| s.w_mpjpe),
            w_pve: mean(|s| s.w_pve),
            orientation_deg: mean(|s| s.orientation_deg),
            depth_median_rel_err: median(&samples.iter().map(|s| s.depth_rel_err).collect::<Vec<_>>()),
            count: samples.len(),
        };
        Self { method: method.into(), summary, samples }
    }

    /// Per-sample rows for several reports, one `method` column.
    pub fn to_csv(reports: &[EvalReport]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "index", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "w_mpjpe_mm", "w_pve_mm", "orientation_deg", "depth_rel_err"])
            .expect("in-memory write");
        for r in reports {
            for s in &r.samples {
                let vals = [s.mpjpe, s.pa_mpjpe, s.pve, s.w_mpjpe, s.w_pve, s.orientation_deg, s.depth_rel_err];
                let mut row = vec![r.method.clone(), s.index.to_string()];
                row.extend(vals.iter().map(f64::to_string));
                w.write_record(&row).expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Summaries keyed by method.
    pub fn summaries_json(reports: &[EvalReport]) -> String {
        let map: serde_json::Map<String, serde_json::Value> = reports
            .iter()
            .map(|r| (r.method.clone(), serde_json::to_value(r.summary).expect("summary serializes")))
            .collect();
        serde_json::to_string_pretty(&map).expect("json")
    }
}

/// How the world body orientation is obtained from a camera-frame prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldMethod {
    /// `R_b = R_b^c`, as if the camera were level.
    None,
    /// [`orient::naive_world_orientation`] with the scene's pseudo camera rotation.
    Naive,
    /// The projected OrientCorrect output.
    OrientCorrect,
}

impl WorldMethod {
    pub const ALL: [WorldMethod; 3] = [WorldMethod::None, WorldMethod::Naive, WorldMethod::OrientCorrect];

    pub fn name(self) -> &'static str {
        match self {
            WorldMethod::None => "none",
            WorldMethod::Naive => "naive",
            WorldMethod::OrientCorrect => "orient_correct",
        }
    }
}

fn vecs(p: &[[f64; 3]]) -> Vec<Vector3<f64>> {
    p.iter().map(|&v| Vector3::from(v)).collect()
}

/// Scores predictions against their scenes. With `true_camera` the naive
/// method uses the exact camera rotation instead of the pseudo one.
pub fn evaluate(
    scenes: &[SceneSample],
    preds: &[Prediction],
    method: WorldMethod,
    true_camera: bool,
) -> Result<EvalReport, MetricsError> {
    if scenes.len() != preds.len() {
        return Err(MetricsError::LengthMismatch(scenes.len(), preds.len()));
    }
    let template = skeleton::toy_template();
    let mut samples = Vec::with_capacity(scenes.len());
    for (scene, p) in scenes.iter().zip(preds) {
        let gt_j = scene.joints3d();
        let gt_v = skeleton::forward_kinematics(&scene.body, template).vertices;
        let (pj, pv) = (vecs(&p.joints), vecs(&p.vertices));
        let rbc = matrix_rows(&p.r_b_cam);
        let r_b = match method {
            WorldMethod::None => rbc,
            WorldMethod::Naive => {
                let rc = if true_camera { scene.rc() } else { scene.rc_noisy() };
                orient::naive_world_orientation(&rc, &rbc)
            }
            WorldMethod::OrientCorrect => orient::project_to_so3(&matrix_rows(&p.r_b_world))?,
        };
        let rc_t = scene.rc().transpose();
        let world = |pts: &[Vector3<f64>]| pts.iter().map(|q| rc_t * q).collect::<Vec<_>>();
        let (w_mpjpe, w_pve) = w_metrics(&world(&gt_j), &to_world(&pj, &r_b, &rbc), &world(&gt_v), &to_world(&pv, &r_b, &rbc))?;
        let tz = scene.weak_cam.t_z;
        samples.push(SampleMetrics {
            index: scene.index,
            mpjpe: mpjpe(&gt_j, &pj, true)?,
            pa_mpjpe: pa_mpjpe(&gt_j, &pj)?,
            pve: pve(&gt_v, &pv)?,
            w_mpjpe,
            w_pve,
            orientation_deg: orient::geodesic_distance(&r_b, &scene.rb()).to_degrees(),
            depth_rel_err: (p.t_z - tz).abs() / tz,
        });
    }
    Ok(EvalReport::new(method.name(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn mpjpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let j = points(&mut rng, 16);
        assert_eq!(mpjpe(&j, &j, false).unwrap(), 0.0);
        let shifted: Vec<_> = j.iter().map(|p| p + Vector3::new(0.01, 0.0, 0.0)).collect();
        assert!(mpjpe(&j, &shifted, true).unwrap() < 1e-12);
        let mut one = j.clone();
        one[5] += Vector3::new(0.003, 0.004, 0.0);
        assert!((mpjpe(&j, &one, false).unwrap() - 5.0 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn pa_mpjpe_zero_under_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = points(&mut rng, 16);
        let r = so3::exp_map(&Vector3::new(0.4, -1.0, 2.0));
        let p: Vec<_> = j.iter().map(|q| 1.7 * (r * q) + Vector3::new(1.0, 2.0, -3.0)).collect();
        assert!(pa_mpjpe(&j, &p).unwrap() < 1e-9);
    }

    #[test]
    fn pa_mpjpe_can_exceed_mpjpe() {
        // One wrong joint: root alignment leaves the error on that joint,
        // the least-squares similarity spreads it over all of them.
        let gt = skeleton::forward_kinematics(&skeleton::BodyState::rest(), skeleton::toy_template()).joints;
        let mut p = gt.clone();
        p[6] += Vector3::new(0.1, 0.0, 0.0);
        let m = mpjpe(&gt, &p, true).unwrap();
        assert!((m - 100.0 / 16.0).abs() < 1e-9);
        assert!(pa_mpjpe(&gt, &p).unwrap() > 2.0 * m);
    }

    #[test]
    fn identity_camera_world_metrics_equal_camera_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (j, p) = (points(&mut rng, 16), points(&mut rng, 16));
        let rbc = so3::exp_map(&Vector3::new(0.1, 0.5, -0.2));
        // R_c = I: the world orientation equals the camera-frame one.
        let jw = to_world(&p, &rbc, &rbc);
        let (w, _) = w_metrics(&j, &jw, &j, &jw).unwrap();
        assert!((w - mpjpe(&j, &p, false).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn exact_camera_gives_isometric_world_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (j, p) = (points(&mut rng, 16), points(&mut rng, 16));
        let rc = so3::exp_map(&Vector3::new(0.6, 0.0, 0.2));
        let rbc = so3::exp_map(&Vector3::new(0.1, 0.5, -0.2));
        let rb = orient::naive_world_orientation(&rc, &rbc);
        let pw = to_world(&p, &rb, &rbc);
        let jw: Vec<_> = j.iter().map(|q| rc.transpose() * q).collect();
        let (w, _) = w_metrics(&jw, &pw, &jw, &pw).unwrap();
        assert!((w - mpjpe(&j, &p, false).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn pa_mpjpe_matches_rotation_grid() {
        // Brute force over rotations at 1° resolution, with the optimal scale
        // and translation for each candidate, should not beat Procrustes and
        // should land within the grid's resolution of it.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = points(&mut rng, 16);
        let r0 = so3::rot_z(0.3) * so3::rot_y(-0.5);
        let pred: Vec<_> = gt.iter().map(|q| 0.9 * (r0 * q) + Vector3::new(0.1, 0.0, 0.2) + 0.05 * Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let pa = pa_mpjpe(&gt, &pred).unwrap();
        let mg = gt.iter().sum::<Vector3<f64>>() / 16.0;
        let mp = pred.iter().sum::<Vector3<f64>>() / 16.0;
        let mut best_sq = f64::INFINITY;
        let mut best = f64::INFINITY;
        let deg = std::f64::consts::PI / 180.0;
        // Search around the inverse of the generating rotation.
        let base = r0.transpose();
        for a in -10..=10 {
            for b in -10..=10 {
                for c in -10..=10 {
                    let r = base * so3::rot_x(a as f64 * deg) * so3::rot_y(b as f64 * deg) * so3::rot_z(c as f64 * deg);
                    let xs: Vec<_> = pred.iter().map(|p| r * (p - mp)).collect();
                    let ys: Vec<_> = gt.iter().map(|q| q - mg).collect();
                    let s = xs.iter().zip(&ys).map(|(x, y)| x.dot(y)).sum::<f64>() / xs.iter().map(|x| x.norm_squared()).sum::<f64>();
                    let sq: f64 = xs.iter().zip(&ys).map(|(x, y)| (s * x - y).norm_squared()).sum();
                    if sq < best_sq {
                        best_sq = sq;
                        best = xs.iter().zip(&ys).map(|(x, y)| (s * x - y).norm()).sum::<f64>() / 16.0 * 1000.0;
                    }
                }
            }
        }
        let pa_sq: f64 = {
            let (_, al) = orient::procrustes_align(&pred, &gt).unwrap();
            al.iter().zip(&gt).map(|(a, b)| (a - b).norm_squared()).sum()
        };
        assert!(pa_sq <= best_sq + 1e-12);
        // One degree of rotation moves a unit-scale point by about 17 mm.
        assert!((pa - best).abs() < 17.5, "pa {pa} grid {best}");
    }

    #[test]
    fn ground_truth_scores_zero() {
        let scenes = crate::synth::generate(&crate::synth::SynthConfig { n: 30, seed: 8, ..Default::default() }).unwrap();
        let preds: Vec<_> = scenes.iter().map(Prediction::ground_truth).collect();
        for m in WorldMethod::ALL {
            let r = evaluate(&scenes, &preds, m, true).unwrap();
            for s in &r.samples {
                if m == WorldMethod::None {
                    continue;
                }
                assert!(s.mpjpe < 1e-9 && s.pa_mpjpe < 1e-6 && s.pve < 1e-9, "{s:?}");
                assert!(s.w_mpjpe < 1e-9 && s.w_pve < 1e-9 && s.depth_rel_err == 0.0, "{s:?}");
                assert!(s.orientation_deg < 1e-5, "{s:?}");
            }
        }
    }

    #[test]
    fn report_serializes_both_formats() {
        let s = SampleMetrics { index: 3, mpjpe: 1.0, pa_mpjpe: 0.5, pve: 2.0, w_mpjpe: 3.0, w_pve: 4.0, orientation_deg: 5.0, depth_rel_err: 0.1 };
        let r = EvalReport::new("naive", vec![s, s]);
        assert_eq!(r.summary.count, 2);
        assert_eq!(r.summary.w_mpjpe, 3.0);
        let csv = EvalReport::to_csv(&[r.clone()]);
        assert_eq!(csv.lines().count(), 3);
        let json: serde_json::Value = serde_json::from_str(&EvalReport::summaries_json(&[r])).unwrap();
        assert_eq!(json["naive"]["orientation_deg"], 5.0);
    }

    proptest! {
        #[test]
        fn pa_squared_error_never_exceeds_root_aligned(seed in 0u64..5000) {
            // Root alignment is one of the similarities Procrustes searches,
            // so the bound holds for summed squared error. It does not hold
            // for the mean distance; see pa_mpjpe_can_exceed_mpjpe.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (j, p) = (points(&mut rng, 16), points(&mut rng, 16));
            let sse = |a: &[Vector3<f64>], b: &[Vector3<f64>]| a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>();
            let (_, aligned) = orient::procrustes_align(&p, &j).unwrap();
            let shift = j[ROOT] - p[ROOT];
            let rooted: Vec<_> = p.iter().map(|q| q + shift).collect();
            prop_assert!(sse(&j, &aligned) <= sse(&j, &rooted) * (1.0 + 1e-12) + 1e-18);
            prop_assert!(sse(&j, &aligned) <= sse(&j, &p) * (1.0 + 1e-12) + 1e-18);
        }

        #[test]
        fn metrics_permutation_invariant(seed in 0u64..5000, shift in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (j, p) = (points(&mut rng, 16), points(&mut rng, 16));
            let (mut jr, mut pr) = (j.clone(), p.clone());
            jr.rotate_left(shift);
            pr.rotate_left(shift);
            prop_assert!((mpjpe(&j, &p, false).unwrap() - mpjpe(&jr, &pr, false).unwrap()).abs() < 1e-9);
            prop_assert!((pa_mpjpe(&j, &p).unwrap() - pa_mpjpe(&jr, &pr).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn pa_invariant_to_similarity_of_prediction(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (j, p) = (points(&mut rng, 16), points(&mut rng, 16));
            let r = so3::exp_map(&Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)));
            let q: Vec<_> = p.iter().map(|x| 0.7 * (r * x) + Vector3::new(0.3, -0.1, 2.0)).collect();
            prop_assert!((pa_mpjpe(&j, &p).unwrap() - pa_mpjpe(&j, &q).unwrap()).abs() < 1e-9);
        }
    }
}
