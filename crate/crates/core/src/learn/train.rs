//! Mini-batch training for the three stages.
//!
//! Stages I and II update the regressor and the depth head. Stage III freezes
//! both and trains OrientCorrect on their outputs. Once per epoch the first
//! batch is re-differentiated term by term and the gradient norms that the
//! stage's detachments should cut are recorded in the report.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::model::{Batch, ForwardPass, LossNodes, Model, ModelConfig, SceneRow};
use super::nn::{clip_global_norm, Adam, AdamConfig};
use super::tensor::Tensor;
use super::{LearnError, TrainStage};
use crate::losses::{self, LossWeights};
use crate::synth::SceneSample;

/// Step schedule: `base` until `decay_at · epochs`, then `base · factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_at: f64,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self { base, decay_at: 1.0, factor: 1.0 }
    }

    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epoch as f64 >= self.decay_at * epochs as f64 {
            self.base * self.factor
        } else {
            self.base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    /// Regressor in stages I and II, OrientCorrect in stage III.
    pub lr: LrSchedule,
    /// Depth head; defaults to `lr`.
    #[serde(default)]
    pub focal_lr: Option<LrSchedule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    /// Global gradient norm limit per step.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 32,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            stage1: StageConfig { epochs: 40, lr: LrSchedule { base: 1e-3, decay_at: 0.6, factor: 0.1 }, focal_lr: None },
            stage2: StageConfig {
                epochs: 80,
                lr: LrSchedule::constant(5e-5),
                focal_lr: Some(LrSchedule { base: 1e-3, decay_at: 0.6, factor: 0.1 }),
            },
            stage3: StageConfig { epochs: 60, lr: LrSchedule { base: 1e-3, decay_at: 0.7, factor: 0.1 }, focal_lr: None },
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: TrainStage) -> &StageConfig {
        match stage {
            TrainStage::I => &self.stage1,
            TrainStage::II => &self.stage2,
            TrainStage::III => &self.stage3,
        }
    }

    pub fn stage_mut(&mut self, stage: TrainStage) -> &mut StageConfig {
        match stage {
            TrainStage::I => &mut self.stage1,
            TrainStage::II => &mut self.stage2,
            TrainStage::III => &mut self.stage3,
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.batch_size < 2 {
            return Err(LearnError::Invalid("batch_size must be at least 2".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(LearnError::Invalid("clip_norm must be positive".into()));
        }
        self.weights.validate().map_err(|e| LearnError::Invalid(e.to_string()))?;
        self.model.validate()?;
        for st in [&self.stage1, &self.stage2, &self.stage3] {
            for lr in std::iter::once(&st.lr).chain(st.focal_lr.as_ref()) {
                if !(lr.base >= 0.0 && lr.factor >= 0.0 && lr.base.is_finite()) {
                    return Err(LearnError::Invalid("learning rates must be finite and non-negative".into()));
                }
            }
        }
        Ok(())
    }
}

/// Gradient norms measured along paths that the stage cuts. `None` where the
/// path does not apply to the stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Full-image term to the 3D joints.
    pub full_joints: Option<f64>,
    /// Full-image term to the crop scale and translation.
    pub full_camera: Option<f64>,
    /// Pseudo-focal term to the crop scale.
    pub pseudo_focal_scale: Option<f64>,
    /// Weak-perspective term to the 3D joints.
    pub weak_joints: Option<f64>,
    /// Stage III total loss to every regressor and depth-head parameter.
    pub frozen_backbone: Option<f64>,
}

impl Audit {
    pub fn values(&self) -> [Option<f64>; 5] {
        [self.full_joints, self.full_camera, self.pseudo_focal_scale, self.weak_joints, self.frozen_backbone]
    }

    pub fn all_zero(&self) -> bool {
        self.values().iter().flatten().all(|&v| v == 0.0)
    }

    /// Worst measured norm across two audits.
    fn merge(self, o: Audit) -> Audit {
        let m = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, None) => x,
            (None, y) => y,
        };
        Audit {
            full_joints: m(self.full_joints, o.full_joints),
            full_camera: m(self.full_camera, o.full_camera),
            pseudo_focal_scale: m(self.pseudo_focal_scale, o.pseudo_focal_scale),
            weak_joints: m(self.weak_joints, o.weak_joints),
            frozen_backbone: m(self.frozen_backbone, o.frozen_backbone),
        }
    }
}

/// Batch-averaged weighted loss terms and optimizer statistics for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: TrainStage,
    pub epoch: usize,
    pub lr: f64,
    pub focal_lr: Option<f64>,
    pub total: f64,
    pub joints3d: f64,
    pub weak2d: f64,
    pub full2d: f64,
    pub vertices: f64,
    pub params: f64,
    pub camera: f64,
    pub pseudo_focal: f64,
    pub orientation: f64,
    /// Mean gradient norm before clipping.
    pub grad_norm: f64,
    pub audit: Audit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

const CSV_HEADER: [&str; 20] = [
    "stage",
    "epoch",
    "lr",
    "focal_lr",
    "total",
    "joints3d",
    "weak2d",
    "full2d",
    "vertices",
    "params",
    "camera",
    "pseudo_focal",
    "orientation",
    "grad_norm",
    "audit_full_joints",
    "audit_full_camera",
    "audit_pseudo_focal_scale",
    "audit_weak_joints",
    "audit_frozen_backbone",
    "audit_ok",
];

impl TrainReport {
    pub fn extend(&mut self, other: TrainReport) {
        self.records.extend(other.records);
    }

    /// Worst audit over all epochs of a stage.
    pub fn audit(&self, stage: TrainStage) -> Audit {
        self.records.iter().filter(|r| r.stage == stage).fold(Audit::default(), |a, r| a.merge(r.audit))
    }

    pub fn audits_ok(&self) -> bool {
        self.records.iter().all(|r| r.audit.all_zero())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let mut row = vec![
                r.stage.name().to_string(),
                r.epoch.to_string(),
                r.lr.to_string(),
                opt(r.focal_lr),
            ];
            row.extend(
                [r.total, r.joints3d, r.weak2d, r.full2d, r.vertices, r.params, r.camera, r.pseudo_focal, r.orientation, r.grad_norm]
                    .iter()
                    .map(f64::to_string),
            );
            row.extend(r.audit.values().iter().map(|v| opt(*v)));
            row.push(r.audit.all_zero().to_string());
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

fn norm_of(grads: &Gradients, vars: &[Var]) -> f64 {
    vars.iter().map(|v| grads.norm(*v).powi(2)).sum::<f64>().sqrt()
}

/// Re-differentiates individual terms of a stage I or II batch.
fn audit_backbone(g: &Graph, f: &ForwardPass, l: &LossNodes, stage: TrainStage) -> Result<Audit, LearnError> {
    let full = g.backward(l.full2d)?;
    let mut a = Audit { full_camera: Some(norm_of(&full, &[f.s, f.t])), ..Audit::default() };
    match stage {
        TrainStage::I => {
            a.full_joints = Some(norm_of(&full, &[f.j3d]));
            if let Some(pf) = l.pseudo_focal {
                a.pseudo_focal_scale = Some(g.backward(pf)?.norm(f.s));
            }
        }
        TrainStage::II => {
            a.weak_joints = Some(g.backward(l.weak2d)?.norm(f.j3d));
        }
        TrainStage::III => unreachable!("stage III has its own audit"),
    }
    Ok(a)
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).filter(|c| c.len() >= 2).map(|c| c.to_vec()).collect()
}

fn stage_rng(seed: u64, stage: TrainStage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stage {
        TrainStage::I => 1,
        TrainStage::II => 2,
        TrainStage::III => 3,
    });
    rng
}

/// Trains `model` for one stage on `scenes`.
pub fn run_stage(stage: TrainStage, model: &mut Model, scenes: &[SceneSample], cfg: &TrainConfig) -> Result<TrainReport, LearnError> {
    cfg.validate()?;
    if scenes.len() < 2 {
        return Err(LearnError::Invalid("training needs at least two scenes".into()));
    }
    let rows: Vec<SceneRow> = scenes.par_iter().map(SceneRow::new).collect();
    match stage {
        TrainStage::I | TrainStage::II => train_backbone(stage, model, &rows, cfg),
        TrainStage::III => train_orient(model, &rows, cfg),
    }
}

fn nan_error(stage: TrainStage, epoch: usize, batch: usize, l: &LossNodes, g: &Graph) -> LearnError {
    let parts = [
        ("joints3d", l.joints3d),
        ("weak2d", l.weak2d),
        ("full2d", l.full2d),
        ("vertices", l.vertices),
        ("params", l.params),
        ("camera", l.camera),
    ];
    let detail = parts.iter().map(|(n, v)| format!("{n}={}", g.scalar(*v))).collect::<Vec<_>>().join(" ");
    LearnError::NaNLoss { stage, epoch, batch, detail }
}

fn train_backbone(stage: TrainStage, model: &mut Model, rows: &[SceneRow], cfg: &TrainConfig) -> Result<TrainReport, LearnError> {
    let sc = cfg.stage(stage);
    let mut rng = stage_rng(cfg.seed, stage);
    let mut adam_reg = Adam::new(&model.regressor.params(), cfg.adam);
    let mut adam_focal = Adam::new(&model.focal.params(), cfg.adam);
    let n_reg = model.regressor.params().len();
    let grid = model.config.feedback_grid;
    let mut report = TrainReport::default();
    for epoch in 0..sc.epochs {
        let lr = sc.lr.at(epoch, sc.epochs);
        let focal_lr = sc.focal_lr.map(|s| s.at(epoch, sc.epochs));
        let batches = shuffled_batches(rows.len(), cfg.batch_size, &mut rng);
        let mut sums = [0.0; 8];
        let mut grad_norm = 0.0;
        let mut audit = Audit::default();
        for (bi, idx) in batches.iter().enumerate() {
            let refs: Vec<&SceneRow> = idx.iter().map(|&i| &rows[i]).collect();
            let batch = Batch::new(&refs, grid);
            let mut g = Graph::new();
            let f = model.forward(&mut g, &batch, true, true);
            let l = model.losses(&mut g, &f, &batch, stage, &cfg.weights);
            let total = g.scalar(l.total);
            if !total.is_finite() {
                return Err(nan_error(stage, epoch, bi, &l, &g));
            }
            if bi == 0 {
                audit = audit_backbone(&g, &f, &l, stage)?;
            }
            let terms = [l.total, l.joints3d, l.weak2d, l.full2d, l.vertices, l.params, l.camera];
            for (s, v) in sums.iter_mut().zip(terms) {
                *s += g.scalar(v);
            }
            sums[7] += l.pseudo_focal.map_or(0.0, |v| g.scalar(v));

            let grads = g.backward(l.total)?;
            let mut gs: Vec<Option<Tensor>> =
                f.regressor_vars.iter().chain(&f.focal_vars).map(|v| grads.get(*v).cloned()).collect();
            grad_norm += clip_global_norm(&mut gs, cfg.clip_norm);
            let (gr, gf) = gs.split_at(n_reg);
            adam_reg.update(model.regressor.params_mut(), gr, lr);
            adam_focal.update(model.focal.params_mut(), gf, focal_lr.unwrap_or(lr));
            if let Some(bn) = &mut model.focal.bn {
                bn.update_running(g.value(f.focal_raw));
            }
        }
        if !model.is_finite() {
            return Err(LearnError::NaNLoss { stage, epoch, batch: batches.len(), detail: "non-finite weights".into() });
        }
        let nb = batches.len().max(1) as f64;
        report.records.push(EpochRecord {
            stage,
            epoch,
            lr,
            focal_lr,
            total: sums[0] / nb,
            joints3d: sums[1] / nb,
            weak2d: sums[2] / nb,
            full2d: sums[3] / nb,
            vertices: sums[4] / nb,
            params: sums[5] / nb,
            camera: sums[6] / nb,
            pseudo_focal: sums[7] / nb,
            orientation: 0.0,
            grad_norm: grad_norm / nb,
            audit,
        });
    }
    Ok(report)
}

/// Stage III audit: the whole pipeline with the frozen weights as leaves.
fn audit_frozen(model: &Model, batch: &Batch, w: &LossWeights) -> Result<f64, LearnError> {
    let mut g = Graph::new();
    let f = model.forward(&mut g, batch, true, false);
    let rbc = g.slice(f.rots, 0, 9);
    let rbc = g.detach(rbc);
    let (out, _) = model.orient_forward(&mut g, batch, rbc, true);
    let target = g.constant(batch.r_b.clone());
    let l = losses::mse_node(&mut g, out, target);
    let l = g.scale(l, w.lambda8);
    let grads = g.backward(l)?;
    let frozen: Vec<Var> = f.regressor_vars.iter().chain(&f.focal_vars).copied().collect();
    Ok(norm_of(&grads, &frozen))
}

fn train_orient(model: &mut Model, rows: &[SceneRow], cfg: &TrainConfig) -> Result<TrainReport, LearnError> {
    let sc = cfg.stage3;
    let mut rng = stage_rng(cfg.seed, TrainStage::III);
    let r_b_cam: Vec<[f64; 9]> = model.predict_rows(rows).iter().map(|p| p.r_b_cam).collect();
    let mut adam = Adam::new(&model.orient.params(), cfg.adam);
    let grid = model.config.feedback_grid;
    let mut report = TrainReport::default();
    for epoch in 0..sc.epochs {
        let lr = sc.lr.at(epoch, sc.epochs);
        let batches = shuffled_batches(rows.len(), cfg.batch_size, &mut rng);
        let (mut sum, mut grad_norm) = (0.0, 0.0);
        let mut audit = Audit::default();
        for (bi, idx) in batches.iter().enumerate() {
            let refs: Vec<&SceneRow> = idx.iter().map(|&i| &rows[i]).collect();
            let batch = Batch::new(&refs, grid);
            if bi == 0 {
                audit.frozen_backbone = Some(audit_frozen(model, &batch, &cfg.weights)?);
            }
            let mut g = Graph::new();
            let rbc = g.constant(Tensor::from_rows(&idx.iter().map(|&i| r_b_cam[i]).collect::<Vec<_>>()));
            let (out, vars) = model.orient_forward(&mut g, &batch, rbc, true);
            let target = g.constant(batch.r_b.clone());
            let l = losses::mse_node(&mut g, out, target);
            let l = g.scale(l, cfg.weights.lambda8);
            let v = g.scalar(l);
            if !v.is_finite() {
                return Err(LearnError::NaNLoss { stage: TrainStage::III, epoch, batch: bi, detail: format!("orientation={v}") });
            }
            sum += v;
            let grads = g.backward(l)?;
            let mut gs: Vec<Option<Tensor>> = vars.iter().map(|v| grads.get(*v).cloned()).collect();
            grad_norm += clip_global_norm(&mut gs, cfg.clip_norm);
            adam.update(model.orient.params_mut(), &gs, lr);
        }
        let nb = batches.len().max(1) as f64;
        report.records.push(EpochRecord {
            stage: TrainStage::III,
            epoch,
            lr,
            focal_lr: None,
            total: sum / nb,
            joints3d: 0.0,
            weak2d: 0.0,
            full2d: 0.0,
            vertices: 0.0,
            params: 0.0,
            camera: 0.0,
            pseudo_focal: 0.0,
            orientation: sum / nb,
            grad_norm: grad_norm / nb,
            audit,
        });
    }
    Ok(report)
}
