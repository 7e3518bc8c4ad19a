//! Versioned JSON checkpoints: every weight tensor is stored with its shape
//! and row-major values.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{Model, FOCAL_INPUT, ORIENT_INPUT, REGRESSOR_INPUT, THETA_DIM};
use super::nn::Mlp;
use super::TrainStage;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("inconsistent weights: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// Last stage trained into these weights.
    pub stage: TrainStage,
    pub seed: u64,
    pub model: Model,
}

fn check_mlp(name: &str, m: &Mlp, input: usize, output: usize) -> Result<(), CheckpointError> {
    let bad = |msg: String| Err(CheckpointError::Shape(format!("{name}: {msg}")));
    if m.layers.is_empty() {
        return bad("no layers".into());
    }
    if m.input_dim() != input || m.output_dim() != output {
        return bad(format!("expected {input} -> {output}, got {} -> {}", m.input_dim(), m.output_dim()));
    }
    for (k, l) in m.layers.iter().enumerate() {
        if l.weight.data.len() != l.weight.rows * l.weight.cols || l.bias.rows != 1 || l.bias.cols != l.weight.cols {
            return bad(format!("layer {k} has inconsistent shapes"));
        }
        if k > 0 && m.layers[k - 1].output_dim() != l.input_dim() {
            return bad(format!("layer {k} input does not match previous output"));
        }
        if !l.weight.is_finite() || !l.bias.is_finite() {
            return bad(format!("layer {k} has non-finite values"));
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(stage: TrainStage, seed: u64, model: Model) -> Self {
        Self { version: CHECKPOINT_VERSION, stage, seed, model }
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(self.version));
        }
        self.model.config.validate().map_err(|e| CheckpointError::Shape(e.to_string()))?;
        check_mlp("regressor", &self.model.regressor, REGRESSOR_INPUT, THETA_DIM)?;
        check_mlp("focal", &self.model.focal.mlp, FOCAL_INPUT, 1)?;
        check_mlp("orient", &self.model.orient, ORIENT_INPUT, 9)?;
        if self.model.focal.bn.is_some() != self.model.config.focal_batch_norm {
            return Err(CheckpointError::Shape("batch norm presence does not match config".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let c: Checkpoint = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::model::ModelConfig;

    #[test]
    fn round_trip_is_exact() {
        let m = Model::new(ModelConfig { focal_batch_norm: true, ..ModelConfig::default() }, 9).unwrap();
        let c = Checkpoint::new(TrainStage::II, 9, m);
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_other_versions_and_shapes() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        let mut c = Checkpoint::new(TrainStage::I, 1, m);
        c.version = 7;
        assert!(matches!(Checkpoint::from_json(&c.to_json()), Err(CheckpointError::Version(7))));
        c.version = CHECKPOINT_VERSION;
        c.model.orient.layers.pop();
        assert!(matches!(Checkpoint::from_json(&c.to_json()), Err(CheckpointError::Shape(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        let json = Checkpoint::new(TrainStage::I, 1, m).to_json();
        let bad = json.replacen('{', "{\"extra\":1,", 1);
        assert!(matches!(Checkpoint::from_json(&bad), Err(CheckpointError::Parse(_))));
    }
}
