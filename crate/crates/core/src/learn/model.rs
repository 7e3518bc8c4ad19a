//! The body regressor, the depth head and OrientCorrect, built on [`Graph`].
//!
//! Θ packs 16 axis-angle joint rotations, 4 shape scales and the crop camera
//! `(s, t_x, t_y)`. The regressor refines Θ from the mean for a fixed number
//! of iterations with shared weights. Each iteration sees the scene features,
//! the current Θ and a feedback vector: the offsets between the observed 2D
//! joints and the current weak projection, read out of a per-scene offset map
//! by bilinear sampling.

use nalgebra::{Matrix3, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::nn::{FocalNet, Mlp};
use super::tensor::Tensor;
use super::{DetachedPath, LearnError, TrainStage};
use crate::geometry::{self, BBox, ImageSize};
use crate::losses::{self, LossWeights};
use crate::skeleton::{self, BodyState, SkeletonTemplate, NUM_JOINTS, NUM_SHAPE};
use crate::so3;
use crate::synth::{SceneSample, FEATURE_LEN};

pub const POSE_DIM: usize = 3 * NUM_JOINTS;
pub const SHAPE_AT: usize = POSE_DIM;
pub const CAM_AT: usize = POSE_DIM + NUM_SHAPE;
pub const THETA_DIM: usize = CAM_AT + 3;
pub const GLOB_DIM: usize = 5;
pub const FEEDBACK_DIM: usize = 2 * NUM_JOINTS;
/// Gain on the final feedback offsets before they enter the depth head.
pub const FEEDBACK_GAIN: f64 = 10.0;
/// Joints closer than this to the camera plane are dropped from the full-image term.
pub const DEPTH_FLOOR: f64 = 0.05;
const FEEDBACK_CLAMP: f64 = 2.0;

pub const REGRESSOR_INPUT: usize = FEATURE_LEN + GLOB_DIM + THETA_DIM + FEEDBACK_DIM;
pub const FOCAL_INPUT: usize = FEATURE_LEN + THETA_DIM + POSE_DIM + FEEDBACK_DIM;
pub const ORIENT_INPUT: usize = FEATURE_LEN + GLOB_DIM + 9 + 9;

/// Rest pose, unit shape, unit scale and zero crop translation.
pub fn theta_mean() -> Vec<f64> {
    let mut t = vec![0.0; THETA_DIM];
    for v in &mut t[SHAPE_AT..CAM_AT] {
        *v = 1.0;
    }
    t[CAM_AT] = 1.0;
    t
}

pub fn body_from_theta(theta: &[f64]) -> BodyState {
    let pose = theta[..POSE_DIM].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut shape = [0.0; NUM_SHAPE];
    shape.copy_from_slice(&theta[SHAPE_AT..CAM_AT]);
    BodyState { pose, shape }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub iterations: usize,
    pub hidden: usize,
    pub focal_hidden: usize,
    pub orient_hidden: usize,
    /// Side of the square feedback offset map.
    pub feedback_grid: usize,
    pub focal_batch_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { iterations: 3, hidden: 128, focal_hidden: 64, orient_hidden: 128, feedback_grid: 8, focal_batch_norm: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.iterations == 0 {
            return Err(LearnError::Invalid("iterations must be at least 1".into()));
        }
        if self.hidden == 0 || self.focal_hidden == 0 || self.orient_hidden == 0 {
            return Err(LearnError::Invalid("hidden widths must be positive".into()));
        }
        if self.feedback_grid < 2 {
            return Err(LearnError::Invalid("feedback grid must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub regressor: Mlp,
    pub focal: FocalNet,
    pub orient: Mlp,
}

/// Per-scene inputs and targets, flattened once.
#[derive(Debug, Clone)]
pub struct SceneRow {
    pub phi: Vec<f64>,
    pub glob: [f64; 5],
    pub obs_crop: Vec<f64>,
    pub obs_full: Vec<f64>,
    /// `[c_x, c_y, h_bbox, W, H]`.
    pub ctx: [f64; 5],
    pub bbox: BBox,
    pub image: ImageSize,
    pub pseudo_focal: f64,
    pub j3d: Vec<f64>,
    pub vertices: Vec<f64>,
    pub shape: [f64; NUM_SHAPE],
    pub rots: Vec<f64>,
    pub cam: [f64; 3],
    pub tz: f64,
    pub r_c: [f64; 9],
    pub r_c_noisy: [f64; 9],
    pub r_b: [f64; 9],
    pub r_b_cam: [f64; 9],
}

impl SceneRow {
    pub fn new(scene: &SceneSample) -> Self {
        let template = skeleton::toy_template();
        let posed = skeleton::forward_kinematics(&scene.body, template);
        let flat3 = |v: &[nalgebra::Vector3<f64>]| v.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        let img = scene.image;
        Self {
            phi: scene.features.clone(),
            glob: geometry::glob_info(&scene.bbox, &img),
            obs_crop: scene.joints_2d_crop.iter().flatten().copied().collect(),
            obs_full: scene
                .joints2d_observed()
                .iter()
                .flat_map(|p| {
                    let n = geometry::to_full_normalized(p, &img);
                    [n.x, n.y]
                })
                .collect(),
            ctx: [scene.bbox.cx, scene.bbox.cy, scene.bbox.h, img.w, img.h],
            bbox: scene.bbox,
            image: img,
            pseudo_focal: img.w.hypot(img.h),
            j3d: scene.joints_3d.iter().flatten().copied().collect(),
            vertices: flat3(&posed.vertices),
            shape: scene.body.shape,
            rots: scene.body.rotation_matrices(),
            cam: [scene.weak_cam.s, scene.weak_cam.t_x, scene.weak_cam.t_y],
            tz: scene.weak_cam.t_z,
            r_c: so3::flatten(&scene.rc()),
            r_c_noisy: so3::flatten(&scene.rc_noisy()),
            r_b: so3::flatten(&scene.rb()),
            r_b_cam: so3::flatten(&scene.rb_cam()),
        }
    }
}

/// A stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub phi: Tensor,
    pub glob: Tensor,
    pub obs_crop: Tensor,
    pub obs_full: Tensor,
    pub ctx: Vec<[f64; 5]>,
    pub bboxes: Vec<BBox>,
    pub images: Vec<ImageSize>,
    pub pseudo_focal: Tensor,
    pub half_h: Tensor,
    pub feedback_map: Tensor,
    pub j3d: Tensor,
    pub vertices: Tensor,
    pub shape: Tensor,
    pub rots: Tensor,
    pub s: Tensor,
    pub t: Tensor,
    pub tz: Vec<f64>,
    pub r_c_noisy: Tensor,
    pub r_b: Tensor,
}

fn stack<const N: usize>(rows: &[&SceneRow], f: impl Fn(&SceneRow) -> [f64; N]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
}

fn stack_vec(rows: &[&SceneRow], f: impl Fn(&SceneRow) -> &Vec<f64>) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| f(r).as_slice()).collect::<Vec<_>>())
}

/// Offset map for one scene: channel `2j + a` holds `clamp(obs_j[a] - node[a])`
/// at every grid node, with nodes spanning [-1, 1] in crop coordinates.
pub fn feedback_map(obs_crop: &[f64], grid: usize) -> Vec<f64> {
    let node = |i: usize| -1.0 + 2.0 * i as f64 / (grid - 1) as f64;
    let mut m = Vec::with_capacity(obs_crop.len() * grid * grid);
    for (c, &o) in obs_crop.iter().enumerate() {
        let axis = c % 2;
        for gy in 0..grid {
            for gx in 0..grid {
                let n = if axis == 0 { node(gx) } else { node(gy) };
                m.push((o - n).clamp(-FEEDBACK_CLAMP, FEEDBACK_CLAMP));
            }
        }
    }
    m
}

impl Batch {
    pub fn new(rows: &[&SceneRow], grid: usize) -> Self {
        Self {
            size: rows.len(),
            phi: stack_vec(rows, |r| &r.phi),
            glob: stack(rows, |r| r.glob),
            obs_crop: stack_vec(rows, |r| &r.obs_crop),
            obs_full: stack_vec(rows, |r| &r.obs_full),
            ctx: rows.iter().map(|r| r.ctx).collect(),
            bboxes: rows.iter().map(|r| r.bbox).collect(),
            images: rows.iter().map(|r| r.image).collect(),
            pseudo_focal: stack(rows, |r| [r.pseudo_focal]),
            half_h: stack(rows, |r| [r.bbox.h / 2.0]),
            feedback_map: Tensor::from_rows(&rows.iter().map(|r| feedback_map(&r.obs_crop, grid)).collect::<Vec<_>>()),
            j3d: stack_vec(rows, |r| &r.j3d),
            vertices: stack_vec(rows, |r| &r.vertices),
            shape: stack(rows, |r| r.shape),
            rots: stack_vec(rows, |r| &r.rots),
            s: stack(rows, |r| [r.cam[0]]),
            t: stack(rows, |r| [r.cam[1], r.cam[2]]),
            tz: rows.iter().map(|r| r.tz).collect(),
            r_c_noisy: stack(rows, |r| r.r_c_noisy),
            r_b: stack(rows, |r| r.r_b),
        }
    }
}

/// Graph nodes of one forward pass through the regressor and the depth head.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub theta: Var,
    pub shape: Var,
    pub cam: Var,
    pub s: Var,
    pub t: Var,
    pub rots: Var,
    pub vertices: Var,
    pub j3d: Var,
    pub tz: Var,
    pub focal_raw: Var,
    pub regressor_vars: Vec<Var>,
    pub focal_vars: Vec<Var>,
}

/// Weighted loss terms of one batch, each already multiplied by its λ.
#[derive(Debug, Clone)]
pub struct LossNodes {
    pub joints3d: Var,
    pub weak2d: Var,
    pub full2d: Var,
    pub vertices: Var,
    pub params: Var,
    pub camera: Var,
    pub pseudo_focal: Option<Var>,
    pub total: Var,
    /// Joints kept by the full-image depth mask, row-major `B × J`.
    pub mask: Vec<bool>,
}

/// Joints, vertices and rotation matrices from pose (`B×48`) and shape (`B×4`).
pub fn fk_graph(g: &mut Graph, pose: Var, shape: Var, template: &SkeletonTemplate) -> (Var, Var, Var) {
    let b = g.value(pose).rows;
    let nj = template.num_joints();
    let rots = g.rodrigues(pose);
    let scales: Vec<Var> = (0..NUM_SHAPE).map(|k| g.slice(shape, k, 1)).collect();
    let origin = g.constant(Tensor::zeros(b, 3));
    let mut frames = Vec::with_capacity(nj);
    let mut joints = Vec::with_capacity(nj);
    for j in 0..nj {
        let r = g.slice(rots, 9 * j, 9);
        match template.parents[j] {
            None => {
                frames.push(r);
                joints.push(origin);
            }
            Some(p) => {
                let pos = g.rigid_points(frames[p], joints[p], scales[template.joint_group[j]], vec![template.offsets[j]]);
                let f = g.mat3mul(frames[p], r);
                frames.push(f);
                joints.push(pos);
            }
        }
    }
    // One rigid block per (bone, group) run, then reorder into template order.
    let mut blocks = Vec::new();
    let mut order = Vec::with_capacity(template.num_vertices());
    let mut keys: Vec<(usize, usize)> = template.vertices.iter().map(|v| (v.bone, v.group)).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut col = 0;
    let mut slot = vec![0usize; template.num_vertices()];
    for (bone, group) in keys {
        let members: Vec<usize> =
            (0..template.num_vertices()).filter(|&i| template.vertices[i].bone == bone && template.vertices[i].group == group).collect();
        let local = members.iter().map(|&i| template.vertices[i].offset).collect();
        blocks.push(g.rigid_points(frames[bone], joints[bone], scales[group], local));
        for &i in &members {
            slot[i] = col;
            col += 1;
        }
    }
    for &s in &slot {
        order.extend([3 * s, 3 * s + 1, 3 * s + 2]);
    }
    let packed = g.concat(&blocks);
    let vertices = g.gather(packed, order);
    let reg = g.constant(expanded_regressor(template));
    let j3d = g.matmul(vertices, reg);
    (j3d, vertices, rots)
}

/// The joint regressor expanded to act on interleaved xyz columns.
fn expanded_regressor(template: &SkeletonTemplate) -> Tensor {
    let (nv, nj) = (template.num_vertices(), template.num_joints());
    let dense = template.dense_regressor();
    let mut m = Tensor::zeros(3 * nv, 3 * nj);
    for v in 0..nv {
        for j in 0..nj {
            let w = dense[v * nj + j];
            for a in 0..3 {
                m.data[(3 * v + a) * 3 * nj + 3 * j + a] = w;
            }
        }
    }
    m
}

/// Weak projection of the current joints, read off the values only.
fn weak_points(theta: &Tensor, template: &SkeletonTemplate) -> Tensor {
    let mut out = Tensor::zeros(theta.rows, FEEDBACK_DIM);
    for r in 0..theta.rows {
        let th = theta.row(r);
        let posed = skeleton::forward_kinematics(&body_from_theta(th), template);
        let (s, tx, ty) = (th[CAM_AT], th[CAM_AT + 1], th[CAM_AT + 2]);
        for (j, p) in posed.joints.iter().enumerate() {
            out.data[r * FEEDBACK_DIM + 2 * j] = s * (p.x + tx);
            out.data[r * FEEDBACK_DIM + 2 * j + 1] = s * (p.y + ty);
        }
    }
    out
}

/// Feedback vector `B × 2J`: joint `j` samples its own two channels of the
/// offset map at its own weak projection.
fn feedback(g: &mut Graph, map: Var, pts: Var, grid: usize) -> Var {
    let sampled = g.bilinear_sample(map, pts, FEEDBACK_DIM, grid);
    let idx = (0..FEEDBACK_DIM).map(|c| (c / 2) * FEEDBACK_DIM + c).collect();
    g.gather(sampled, idx)
}

/// Camera-frame output for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub theta: Vec<f64>,
    pub t_z: f64,
    pub focal: f64,
    /// Root-relative camera-frame joints, meters.
    pub joints: Vec<[f64; 3]>,
    pub vertices: Vec<[f64; 3]>,
    /// Camera-frame body orientation, row-major.
    pub r_b_cam: [f64; 9],
    /// Raw OrientCorrect output, row-major.
    pub r_b_world: [f64; 9],
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, LearnError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regressor = Mlp::new(&[REGRESSOR_INPUT, config.hidden, config.hidden, THETA_DIM], 0.01, &mut rng);
        let focal = FocalNet::new(FOCAL_INPUT, config.focal_hidden, config.focal_batch_norm, &mut rng);
        let orient = Mlp::new(&[ORIENT_INPUT, config.orient_hidden, config.orient_hidden, 9], 0.01, &mut rng);
        Ok(Self { config, regressor, focal, orient })
    }

    pub fn is_finite(&self) -> bool {
        self.regressor.is_finite() && self.focal.params().iter().all(|t| t.is_finite()) && self.orient.is_finite()
    }

    /// Regressor and depth head on a batch. With `backbone_params` the
    /// regressor and depth-head weights are trainable leaves. `training`
    /// selects batch statistics in the depth head's normalization.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, backbone_params: bool, training: bool) -> ForwardPass {
        let template = skeleton::toy_template();
        let b = batch.size;
        let grid = self.config.feedback_grid;
        let reg = self.regressor.bind(g, backbone_params);
        let phi = g.constant(batch.phi.clone());
        let glob = g.constant(batch.glob.clone());
        let map = g.constant(batch.feedback_map.clone());
        let mean = theta_mean();
        let mut theta = g.constant(Tensor::from_rows(&vec![mean.as_slice(); b]));
        for _ in 0..self.config.iterations {
            let pts = g.constant(weak_points(g.value(theta), template));
            let fb = feedback(g, map, pts, grid);
            let input = g.concat(&[phi, glob, theta, fb]);
            let delta = reg.forward(g, input);
            theta = g.add(theta, delta);
        }
        let pose = g.slice(theta, 0, POSE_DIM);
        let shape = g.slice(theta, SHAPE_AT, NUM_SHAPE);
        let cam = g.slice(theta, CAM_AT, 3);
        let s = g.slice(cam, 0, 1);
        let t = g.slice(cam, 1, 2);
        let (j3d, vertices, rots) = fk_graph(g, pose, shape, template);

        // The depth head only ever sees values: its input is cut from the regressor.
        let pts = g.constant(weak_points(g.value(theta), template));
        let fb = feedback(g, map, pts, grid);
        let mut rows = Vec::with_capacity(b);
        for r in 0..b {
            let mut row = Vec::with_capacity(FOCAL_INPUT);
            row.extend_from_slice(batch.phi.row(r));
            row.extend_from_slice(g.value(theta).row(r));
            row.extend_from_slice(g.value(j3d).row(r));
            row.extend(g.value(fb).row(r).iter().map(|v| v * FEEDBACK_GAIN));
            rows.push(row);
        }
        let focal_in = g.constant(Tensor::from_rows(&rows));
        let (tz, focal_raw, focal_vars) = self.focal.forward(g, focal_in, backbone_params, training);
        ForwardPass {
            theta,
            shape,
            cam,
            s,
            t,
            rots,
            vertices,
            j3d,
            tz,
            focal_raw,
            regressor_vars: reg.vars(),
            focal_vars,
        }
    }

    /// Supervision for stages I and II with that stage's detachments.
    pub fn losses(&self, g: &mut Graph, f: &ForwardPass, batch: &Batch, stage: TrainStage, w: &LossWeights) -> LossNodes {
        let template = skeleton::toy_template();
        let maybe_detach = |g: &mut Graph, v: Var, path: DetachedPath| if stage.is_detached(path) { g.detach(v) } else { v };

        let gt3d = g.constant(batch.j3d.clone());
        let l = losses::mse_node(g, f.j3d, gt3d);
        let joints3d = g.scale(l, w.lambda1);

        let jw = maybe_detach(g, f.j3d, DetachedPath::WeakJoints);
        let wp = g.weak_project(jw, f.cam);
        let obs = g.constant(batch.obs_crop.clone());
        let l = losses::mse_node(g, wp, obs);
        let weak2d = g.scale(l, w.lambda2);

        let jf = maybe_detach(g, f.j3d, DetachedPath::FullJoints);
        let sf = maybe_detach(g, f.s, DetachedPath::FullCamera);
        let tf = maybe_detach(g, f.t, DetachedPath::FullCamera);
        let (pred, mask) = g.full_perspective(jf, f.tz, sf, tf, batch.ctx.clone(), DEPTH_FLOOR);
        let obs = g.constant(batch.obs_full.clone());
        let kw = g.constant(losses::full_weight_tensor(&batch.bboxes, &batch.images, &mask));
        let l = losses::weighted_mse_node(g, pred, obs, kw);
        let full2d = g.scale(l, w.lambda3);

        let gtv = g.constant(batch.vertices.clone());
        let mut vertices = None;
        for (level, lambda) in [(&template.sparse, w.lambda4), (&template.coarse, w.lambda5), (&template.complete, w.lambda6)] {
            let cols: Vec<usize> = level.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect();
            let p = g.gather(f.vertices, cols.clone());
            let q = g.gather(gtv, cols);
            let l = losses::l1_node(g, p, q);
            let l = g.scale(l, lambda);
            vertices = Some(match vertices {
                None => l,
                Some(acc) => g.add(acc, l),
            });
        }
        let vertices = vertices.expect("three levels");

        let gts = g.constant(batch.shape.clone());
        let l = losses::mse_node(g, f.shape, gts);
        let ls = g.scale(l, w.lambda7);
        let gtr = g.constant(batch.rots.clone());
        let l = losses::mse_node(g, f.rots, gtr);
        let lr = g.scale(l, w.lambda8);
        let params = g.add(ls, lr);

        let gs = g.constant(batch.s.clone());
        let gt = g.constant(batch.t.clone());
        let ls = losses::mse_node(g, f.s, gs);
        let lt = losses::mse_node(g, f.t, gt);
        let l = g.add(ls, lt);
        let camera = g.scale(l, w.lambda_cam);

        let mut total = g.add(joints3d, weak2d);
        for term in [full2d, vertices, params, camera] {
            total = g.add(total, term);
        }
        let pseudo_focal = stage.active_losses().contains(&super::LossTerm::PseudoFocal).then(|| {
            let sp = maybe_detach(g, f.s, DetachedPath::PseudoFocalScale);
            let stz = g.mul(sp, f.tz);
            let hh = g.constant(batch.half_h.clone());
            let focal = g.mul(stz, hh);
            let prior = g.constant(batch.pseudo_focal.clone());
            let l = losses::mse_node(g, focal, prior);
            g.scale(l, w.lambda_f)
        });
        if let Some(pf) = pseudo_focal {
            total = g.add(total, pf);
        }
        LossNodes { joints3d, weak2d, full2d, vertices, params, camera, pseudo_focal, total, mask }
    }

    /// OrientCorrect on a batch: `R_b^c + FC(φ, glob, R̃_c, R_b^c)`, `B × 9`.
    /// Returns the output and the parameter nodes.
    pub fn orient_forward(&self, g: &mut Graph, batch: &Batch, r_b_cam: Var, trainable: bool) -> (Var, Vec<Var>) {
        let oc = self.orient.bind(g, trainable);
        let phi = g.constant(batch.phi.clone());
        let glob = g.constant(batch.glob.clone());
        let rc = g.constant(batch.r_c_noisy.clone());
        let input = g.concat(&[phi, glob, rc, r_b_cam]);
        let delta = oc.forward(g, input);
        (g.add(r_b_cam, delta), oc.vars())
    }

    /// Inference on scenes, in chunks evaluated in parallel.
    pub fn predict(&self, scenes: &[SceneSample]) -> Vec<Prediction> {
        let rows: Vec<SceneRow> = scenes.par_iter().map(SceneRow::new).collect();
        self.predict_rows(&rows)
    }

    pub fn predict_rows(&self, rows: &[SceneRow]) -> Vec<Prediction> {
        const CHUNK: usize = 64;
        let chunks: Vec<&[SceneRow]> = rows.chunks(CHUNK).collect();
        chunks
            .par_iter()
            .flat_map_iter(|chunk| {
                let refs: Vec<&SceneRow> = chunk.iter().collect();
                let batch = Batch::new(&refs, self.config.feedback_grid);
                let mut g = Graph::new();
                let f = self.forward(&mut g, &batch, false, false);
                let rbc = g.slice(f.rots, 0, 9);
                let (rb, _) = self.orient_forward(&mut g, &batch, rbc, false);
                (0..batch.size)
                    .map(|r| {
                        let theta = g.value(f.theta).row(r).to_vec();
                        let t_z = g.value(f.tz).get(r, 0);
                        let s = theta[CAM_AT];
                        let focal = s * batch.bboxes[r].h * t_z / 2.0;
                        let tri = |v: &[f64]| v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
                        let mut r_b_cam = [0.0; 9];
                        r_b_cam.copy_from_slice(g.value(rbc).row(r));
                        let mut r_b_world = [0.0; 9];
                        r_b_world.copy_from_slice(g.value(rb).row(r));
                        Prediction {
                            joints: tri(g.value(f.j3d).row(r)),
                            vertices: tri(g.value(f.vertices).row(r)),
                            theta,
                            t_z,
                            focal,
                            r_b_cam,
                            r_b_world,
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Unweighted full-image term (mean weighted squared residual) over rows, inference mode.
    pub fn full2d_error(&self, rows: &[SceneRow]) -> f64 {
        let w = LossWeights { lambda3: 1.0, ..LossWeights::default() };
        let mut sum = 0.0;
        for chunk in rows.chunks(256) {
            let refs: Vec<&SceneRow> = chunk.iter().collect();
            let batch = Batch::new(&refs, self.config.feedback_grid);
            let mut g = Graph::new();
            let f = self.forward(&mut g, &batch, false, false);
            let l = self.losses(&mut g, &f, &batch, TrainStage::II, &w);
            sum += g.scalar(l.full2d) * chunk.len() as f64;
        }
        sum / rows.len().max(1) as f64
    }
}

impl Prediction {
    /// The scene's own labels in prediction form.
    pub fn ground_truth(scene: &SceneSample) -> Self {
        let posed = skeleton::forward_kinematics(&scene.body, skeleton::toy_template());
        let mut theta: Vec<f64> = scene.body.pose.iter().flatten().copied().collect();
        theta.extend_from_slice(&scene.body.shape);
        let wc = scene.weak_cam;
        theta.extend([wc.s, wc.t_x, wc.t_y]);
        Prediction {
            theta,
            t_z: wc.t_z,
            focal: scene.intrinsics.f,
            joints: scene.joints_3d.clone(),
            vertices: posed.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            r_b_cam: so3::flatten(&scene.rb_cam()),
            r_b_world: so3::flatten(&scene.rb()),
        }
    }
}

/// Orientation helpers shared with evaluation.
pub fn matrix_rows(m: &[f64; 9]) -> Matrix3<f64> {
    so3::unflatten(m)
}

/// Full-image pixel position of each predicted joint under the predicted depth.
pub fn reproject(pred: &Prediction, row: &SceneRow) -> Vec<Vector2<f64>> {
    let (s, tx, ty) = (pred.theta[CAM_AT], pred.theta[CAM_AT + 1], pred.theta[CAM_AT + 2]);
    let [cx, cy, h, w, hh] = row.ctx;
    let f = s * h * pred.t_z / 2.0;
    let bx = tx + (2.0 * cx - w) / (s * h);
    let by = ty + (2.0 * cy - hh) / (s * h);
    pred.joints
        .iter()
        .map(|p| {
            let z = p[2] + pred.t_z;
            Vector2::new(f * (p[0] + bx) / z + w / 2.0, f * (p[1] + by) / z + hh / 2.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn scenes(n: usize) -> Vec<SceneSample> {
        synth::generate(&SynthConfig { n, seed: 5, ..SynthConfig::default() }).unwrap()
    }

    #[test]
    fn fk_graph_matches_skeleton() {
        let sc = scenes(4);
        let rows: Vec<SceneRow> = sc.iter().map(SceneRow::new).collect();
        let refs: Vec<&SceneRow> = rows.iter().collect();
        let batch = Batch::new(&refs, 8);
        let mut g = Graph::new();
        let pose: Vec<Vec<f64>> = sc.iter().map(|s| s.body.pose.iter().flatten().copied().collect()).collect();
        let pose = g.constant(Tensor::from_rows(&pose));
        let shape = g.constant(batch.shape.clone());
        let (j, v, r) = fk_graph(&mut g, pose, shape, skeleton::toy_template());
        for k in 0..4 {
            for (a, b) in g.value(j).row(k).iter().zip(batch.j3d.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.value(v).row(k).iter().zip(batch.vertices.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in g.value(r).row(k).iter().zip(batch.rots.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_regressor_returns_mean() {
        let mut m = Model::new(ModelConfig::default(), 1).unwrap();
        m.regressor = Mlp::zeros(&[REGRESSOR_INPUT, 8, 8, THETA_DIM]);
        let p = m.predict(&scenes(3));
        for pr in &p {
            assert_eq!(pr.theta, theta_mean());
        }
    }

    #[test]
    fn constant_delta_one_iteration() {
        let mut m = Model::new(ModelConfig { iterations: 1, ..ModelConfig::default() }, 1).unwrap();
        let mut reg = Mlp::zeros(&[REGRESSOR_INPUT, 8, 8, THETA_DIM]);
        let delta: Vec<f64> = (0..THETA_DIM).map(|i| 0.001 * i as f64).collect();
        reg.layers[2].bias = Tensor::row_vector(delta.clone());
        m.regressor = reg;
        let p = m.predict(&scenes(2));
        let want: Vec<f64> = theta_mean().iter().zip(&delta).map(|(a, b)| a + b).collect();
        assert_eq!(p[0].theta, want);
    }

    #[test]
    fn zero_orient_is_identity_on_camera_orientation() {
        let mut m = Model::new(ModelConfig::default(), 2).unwrap();
        m.orient = Mlp::zeros(&[ORIENT_INPUT, 4, 4, 9]);
        for p in m.predict(&scenes(3)) {
            assert_eq!(p.r_b_world, p.r_b_cam);
        }
    }

    #[test]
    fn feedback_reads_offsets() {
        let obs = vec![0.3, -0.2, 0.9, 0.1];
        let mut obs_full = obs.clone();
        obs_full.resize(FEEDBACK_DIM, 0.0);
        let map = feedback_map(&obs_full, 8);
        let mut g = Graph::new();
        let mv = g.constant(Tensor::row_vector(map));
        let mut pts = vec![0.0; FEEDBACK_DIM];
        pts[..4].copy_from_slice(&[0.1, 0.1, -0.5, 0.4]);
        let pv = g.constant(Tensor::row_vector(pts));
        let fb = feedback(&mut g, mv, pv, 8);
        let got = g.value(fb).row(0);
        let want = [0.2, -0.3, 1.4, -0.3];
        for k in 0..4 {
            assert!((got[k] - want[k]).abs() < 1e-12, "{k}: {} vs {}", got[k], want[k]);
        }
    }

    #[test]
    fn reproject_matches_ground_truth_camera() {
        let sc = scenes(3);
        for s in &sc {
            let row = SceneRow::new(s);
            let mut theta = theta_mean();
            theta[CAM_AT..].copy_from_slice(&row.cam);
            let pred = Prediction {
                theta,
                t_z: s.weak_cam.t_z,
                focal: 0.0,
                joints: s.joints_3d.clone(),
                vertices: vec![],
                r_b_cam: [0.0; 9],
                r_b_world: [0.0; 9],
            };
            for (a, b) in reproject(&pred, &row).iter().zip(s.joints2d_full()) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }
}
