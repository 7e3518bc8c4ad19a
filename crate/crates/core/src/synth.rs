//! Synthetic scenes: camera, body, distance, and the labels derived from them.

use std::io::{BufRead, Write};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, BBox, BodyTranslation, CameraIntrinsics, GeometryError, ImageSize, BODY_RANGE_M,
};
use crate::skeleton::{self, BodyState, SkeletonTemplate, NUM_JOINTS, NUM_SHAPE};
use crate::so3;

pub const SCENE_VERSION: u32 = 1;
/// 32 crop coordinates, 15 limb ratios, bbox aspect, 5 glob_info entries.
pub const FEATURE_LEN: usize = 2 * NUM_JOINTS + (NUM_JOINTS - 1) + 1 + 5;
const BBOX_MARGIN: f64 = 1.1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n: usize,
    pub tz_min: f64,
    pub tz_max: f64,
    pub pitch_max_deg: f64,
    pub roll_max_deg: f64,
    /// Body heading in the world frame.
    pub yaw_max_deg: f64,
    pub pixel_noise: f64,
    pub rot_noise_deg: f64,
    pub image_sizes: Vec<ImageSize>,
    /// Focal length is drawn log-uniformly in this multiple of the image diagonal.
    pub focal_scale: (f64, f64),
    /// Overrides the focal distribution when set.
    pub focal_px: Option<f64>,
    pub pose_sigma: f64,
    pub pose_clip: f64,
    pub shape_sigma: f64,
    /// Rejects scenes with any joint closer than this to the camera.
    pub min_depth: f64,
    /// Root pixel position is uniform in [m, 1-m] of each image axis.
    pub root_margin: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n: 1000,
            tz_min: 0.3,
            tz_max: 10.0,
            pitch_max_deg: 45.0,
            roll_max_deg: 45.0,
            yaw_max_deg: 45.0,
            pixel_noise: 1.0,
            rot_noise_deg: 5.0,
            image_sizes: [(1920.0, 1080.0), (1280.0, 720.0), (1000.0, 1000.0), (1080.0, 1920.0), (640.0, 480.0)]
                .into_iter()
                .map(|(w, h)| ImageSize { w, h })
                .collect(),
            focal_scale: (0.5, 2.0),
            focal_px: None,
            pose_sigma: 0.05,
            pose_clip: 1.0,
            shape_sigma: 0.03,
            min_depth: 0.1,
            root_margin: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if !(self.tz_min > 0.0 && self.tz_min <= self.tz_max && self.tz_max.is_finite()) {
            return bad("t_z range must satisfy 0 < tz_min <= tz_max");
        }
        for (name, v) in [("pitch", self.pitch_max_deg), ("roll", self.roll_max_deg), ("yaw", self.yaw_max_deg)] {
            if !(0.0..=180.0).contains(&v) {
                return bad(&format!("{name} range must be within [0, 180] degrees"));
            }
        }
        if !(self.pixel_noise >= 0.0 && self.rot_noise_deg >= 0.0 && self.pose_sigma >= 0.0 && self.shape_sigma >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if self.image_sizes.is_empty() || self.image_sizes.iter().any(|s| !(s.w > 0.0 && s.h > 0.0)) {
            return bad("image size list must be non-empty and positive");
        }
        let (lo, hi) = self.focal_scale;
        if !(lo > 0.0 && lo <= hi) || self.focal_px.is_some_and(|f| !(f > 0.0)) {
            return bad("focal distribution must be positive");
        }
        if !(0.0..0.5).contains(&self.root_margin) {
            return bad("root margin must be in [0, 0.5)");
        }
        if !(self.pose_clip > 0.0 && self.pose_clip < std::f64::consts::PI / 3f64.sqrt()) {
            return bad("pose clip must keep every joint angle below π");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakCamParams {
    pub s: f64,
    pub t_x: f64,
    pub t_y: f64,
    /// Root depth paired with the crop camera.
    pub t_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSample {
    pub version: u32,
    pub index: u64,
    pub image: ImageSize,
    pub intrinsics: CameraIntrinsics,
    /// World to camera rotation, rows.
    pub r_c: [[f64; 3]; 3],
    pub t_c: [f64; 3],
    /// Pseudo camera rotation handed to the model.
    pub r_c_noisy: [[f64; 3]; 3],
    pub body: BodyState,
    /// Body orientation in the world frame.
    pub r_b: [[f64; 3]; 3],
    /// Body orientation in the camera frame, `R_c · R_b`.
    pub r_b_cam: [[f64; 3]; 3],
    pub t_b: BodyTranslation,
    pub weak_cam: WeakCamParams,
    /// Root-relative camera-frame joints, meters.
    pub joints_3d: Vec<[f64; 3]>,
    /// Noiseless projections, pixels.
    pub joints_2d_full: Vec<[f64; 2]>,
    /// Projections with detector noise, pixels.
    pub joints_2d_observed: Vec<[f64; 2]>,
    /// Observed joints in crop-normalized coordinates.
    pub joints_2d_crop: Vec<[f64; 2]>,
    pub bbox: BBox,
    pub features: Vec<f64>,
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::from(*a)
}

fn v2(a: &[f64; 2]) -> Vector2<f64> {
    Vector2::new(a[0], a[1])
}

impl SceneSample {
    pub fn joints3d(&self) -> Vec<Vector3<f64>> {
        self.joints_3d.iter().map(v3).collect()
    }

    pub fn joints2d_full(&self) -> Vec<Vector2<f64>> {
        self.joints_2d_full.iter().map(v2).collect()
    }

    pub fn joints2d_observed(&self) -> Vec<Vector2<f64>> {
        self.joints_2d_observed.iter().map(v2).collect()
    }

    pub fn rc(&self) -> Matrix3<f64> {
        so3::from_rows(&self.r_c)
    }

    pub fn rc_noisy(&self) -> Matrix3<f64> {
        so3::from_rows(&self.r_c_noisy)
    }

    pub fn rb(&self) -> Matrix3<f64> {
        so3::from_rows(&self.r_b)
    }

    pub fn rb_cam(&self) -> Matrix3<f64> {
        so3::from_rows(&self.r_b_cam)
    }

    pub fn focal_scale(&self) -> f64 {
        self.intrinsics.f / geometry::normalization_focal(&self.image)
    }

    /// Re-projects the stored joints with the stored camera.
    pub fn reproject(&self) -> Result<Vec<Vector2<f64>>, GeometryError> {
        self.joints3d().iter().map(|p| geometry::project_perspective(p, &self.t_b, &self.intrinsics)).collect()
    }
}

/// Independent generator stream for one scene index.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn symmetric(rng: &mut impl Rng, max_deg: f64) -> f64 {
    let u: f64 = rng.gen_range(-1.0..=1.0);
    (u * max_deg).to_radians()
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.gen();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// `R · exp(ω̂)` with ω drawn isotropically, σ in degrees.
pub fn perturb_rotation(r: &Matrix3<f64>, sigma_deg: f64, rng: &mut impl Rng) -> Matrix3<f64> {
    let normal = Normal::new(0.0, sigma_deg.to_radians()).expect("sigma is non-negative");
    let w = Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    r * so3::exp_map(&w)
}

/// Distortion descriptors computed from the observed 2D joints and the bbox.
pub fn distortion_features_from(obs: &[Vector2<f64>], bbox: &BBox, img: &ImageSize, template: &SkeletonTemplate) -> Vec<f64> {
    let mut phi = Vec::with_capacity(FEATURE_LEN);
    for p in obs {
        let c = geometry::to_crop(p, bbox);
        phi.extend([c.x, c.y]);
    }
    for j in 1..template.num_joints() {
        let p = template.parents[j].expect("non-root joint");
        let seen = (obs[j] - obs[p]).norm() / bbox.h;
        let rest = v3(&template.offsets[j]).norm() / BODY_RANGE_M;
        phi.push(seen / rest);
    }
    phi.push(bbox.w / bbox.h);
    phi.extend(geometry::glob_info(bbox, img));
    phi
}

pub fn distortion_features(sample: &SceneSample) -> Vec<f64> {
    distortion_features_from(&sample.joints2d_observed(), &sample.bbox, &sample.image, skeleton::toy_template())
}

/// Tight bbox around the points, widened by the margin on both axes.
pub fn bbox_around(points: &[Vector2<f64>]) -> Result<BBox, GeometryError> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, BBOX_MARGIN * (y1 - y0), BBOX_MARGIN * (x1 - x0))
}

pub fn sample_scene(cfg: &SynthConfig, index: u64, rng: &mut impl Rng) -> Result<SceneSample, SynthError> {
    let template = skeleton::toy_template();
    let pose_noise = Normal::new(0.0, cfg.pose_sigma).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let shape_noise = Normal::new(0.0, cfg.shape_sigma).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise).map_err(|e| SynthError::InvalidConfig(e.to_string()))?;
    loop {
        let image = cfg.image_sizes[rng.gen_range(0..cfg.image_sizes.len())];
        let ft = geometry::normalization_focal(&image);
        let scale = log_uniform(rng, cfg.focal_scale.0, cfg.focal_scale.1);
        let f = cfg.focal_px.unwrap_or(ft * scale);

        let r_c = so3::rot_x(symmetric(rng, cfg.pitch_max_deg)) * so3::rot_z(symmetric(rng, cfg.roll_max_deg));
        let r_b = so3::rot_y(symmetric(rng, cfg.yaw_max_deg));
        let r_b_cam = r_c * r_b;

        let mut body = BodyState::rest();
        let w0 = so3::log_map(&r_b_cam);
        body.pose[0] = [w0.x, w0.y, w0.z];
        for w in body.pose.iter_mut().skip(1) {
            for c in w.iter_mut() {
                *c = pose_noise.sample(rng).clamp(-cfg.pose_clip, cfg.pose_clip);
            }
        }
        for b in body.shape.iter_mut() {
            *b = (1.0 + shape_noise.sample(rng)).clamp(0.8, 1.2);
        }
        let posed = skeleton::forward_kinematics(&body, template);

        let t_z = log_uniform(rng, cfg.tz_min, cfg.tz_max);
        let u = rng.gen_range(cfg.root_margin..=1.0 - cfg.root_margin) * image.w;
        let v = rng.gen_range(cfg.root_margin..=1.0 - cfg.root_margin) * image.h;
        if posed.joints.iter().any(|p| p.z + t_z < cfg.min_depth) {
            continue;
        }
        let t_b = BodyTranslation::new((u - image.w / 2.0) * t_z / f, (v - image.h / 2.0) * t_z / f, t_z)?;
        let k = CameraIntrinsics::centered(f, image)?;
        let full: Vec<Vector2<f64>> =
            posed.joints.iter().map(|p| geometry::project_perspective(p, &t_b, &k)).collect::<Result<_, _>>()?;
        let bbox = bbox_around(&full)?;
        let s = 2.0 * f / (bbox.h * t_z);
        let t = geometry::full_to_crop_translation(&Vector2::new(t_b.x, t_b.y), &bbox, &image, s)?;
        let observed: Vec<Vector2<f64>> =
            full.iter().map(|p| p + Vector2::new(pixel_noise.sample(rng), pixel_noise.sample(rng))).collect();
        let r_c_noisy = perturb_rotation(&r_c, cfg.rot_noise_deg, rng);
        let features = distortion_features_from(&observed, &bbox, &image, template);
        return Ok(SceneSample {
            version: SCENE_VERSION,
            index,
            image,
            intrinsics: k,
            r_c: so3::to_rows(&r_c),
            t_c: [0.0; 3],
            r_c_noisy: so3::to_rows(&r_c_noisy),
            body,
            r_b: so3::to_rows(&r_b),
            r_b_cam: so3::to_rows(&r_b_cam),
            t_b,
            weak_cam: WeakCamParams { s, t_x: t.x, t_y: t.y, t_z },
            joints_3d: posed.joints.iter().map(|p| [p.x, p.y, p.z]).collect(),
            joints_2d_full: full.iter().map(|p| [p.x, p.y]).collect(),
            joints_2d_observed: observed.iter().map(|p| [p.x, p.y]).collect(),
            joints_2d_crop: observed.iter().map(|p| geometry::to_crop(p, &bbox)).map(|c| [c.x, c.y]).collect(),
            bbox,
            features,
        });
    }
}

/// `cfg.n` scenes, each drawn from its own index stream, generated in parallel.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SceneSample>, SynthError> {
    cfg.validate()?;
    (0..cfg.n as u64)
        .into_par_iter()
        .map(|i| sample_scene(cfg, i, &mut scene_rng(cfg.seed, i)))
        .collect()
}

pub fn write_jsonl(out: &mut impl Write, scenes: &[SceneSample]) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(input: impl BufRead) -> Result<Vec<SceneSample>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SceneSample =
            serde_json::from_str(&line).map_err(|e| SynthError::Parse { line: i + 1, msg: e.to_string() })?;
        if s.version != SCENE_VERSION {
            return Err(SynthError::Parse { line: i + 1, msg: format!("unsupported scene version {}", s.version) });
        }
        if s.joints_3d.len() != NUM_JOINTS || s.joints_2d_observed.len() != NUM_JOINTS || s.body.pose.len() != NUM_JOINTS {
            return Err(SynthError::Parse { line: i + 1, msg: format!("expected {NUM_JOINTS} joints") });
        }
        out.push(s);
    }
    Ok(out)
}

const _: () = assert!(NUM_SHAPE == 4);
