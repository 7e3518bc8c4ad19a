//! Reverse-mode autodiff, small dense networks, the iterative body
//! regressor, and the three-stage trainer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("loss must be a scalar, got a {0}x{1} tensor")]
    NonScalarLoss(usize, usize),
    #[error("graph edge out of evaluation order at node {0}")]
    CycleDetected(usize),
    #[error("non-finite loss in stage {stage:?}, epoch {epoch}, batch {batch}: {detail}")]
    NaNLoss { stage: TrainStage, epoch: usize, batch: usize, detail: String },
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainStage {
    I,
    II,
    III,
}

/// Networks that can receive updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Module {
    Regressor,
    Focal,
    OrientCorrect,
}

/// Supervision terms the trainer can switch on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossTerm {
    Joints3d,
    Weak2d,
    Full2d,
    Vertices,
    Params,
    Camera,
    PseudoFocal,
    WorldOrientation,
}

/// Inputs cut from a loss term's backward path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetachedPath {
    /// 3D joints feeding the full-perspective term.
    FullJoints,
    /// Crop scale and translation feeding the full-perspective term.
    FullCamera,
    /// Crop scale feeding the focal length in the pseudo-focal term.
    PseudoFocalScale,
    /// 3D joints feeding the weak-perspective term.
    WeakJoints,
    /// Everything upstream of OrientCorrect.
    FrozenBackbone,
}

impl TrainStage {
    pub const ALL: [TrainStage; 3] = [TrainStage::I, TrainStage::II, TrainStage::III];

    pub fn name(self) -> &'static str {
        match self {
            TrainStage::I => "I",
            TrainStage::II => "II",
            TrainStage::III => "III",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "I" | "i" | "1" => Some(TrainStage::I),
            "II" | "ii" | "2" => Some(TrainStage::II),
            "III" | "iii" | "3" => Some(TrainStage::III),
            _ => None,
        }
    }

    pub fn trainable(self) -> &'static [Module] {
        match self {
            TrainStage::I | TrainStage::II => &[Module::Regressor, Module::Focal],
            TrainStage::III => &[Module::OrientCorrect],
        }
    }

    pub fn active_losses(self) -> &'static [LossTerm] {
        use LossTerm::*;
        match self {
            TrainStage::I => &[Joints3d, Weak2d, Full2d, Vertices, Params, Camera, PseudoFocal],
            TrainStage::II => &[Joints3d, Weak2d, Full2d, Vertices, Params, Camera],
            TrainStage::III => &[WorldOrientation],
        }
    }

    pub fn detached(self) -> &'static [DetachedPath] {
        use DetachedPath::*;
        match self {
            TrainStage::I => &[FullJoints, FullCamera, PseudoFocalScale],
            TrainStage::II => &[WeakJoints, FullCamera],
            TrainStage::III => &[FrozenBackbone],
        }
    }

    pub fn is_detached(self, p: DetachedPath) -> bool {
        self.detached().contains(&p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let l = g.square(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(5.0));
        let xd = g.detach(x);
        let l = g.mul(xd, y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.norm(x), 0.0);
        assert_eq!(grads.get(y).unwrap().data, vec![2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 3));
        assert!(matches!(g.backward(x), Err(LearnError::NonScalarLoss(2, 3))));
    }

    #[test]
    fn stage_three_trains_only_orient() {
        assert_eq!(TrainStage::III.trainable(), &[Module::OrientCorrect]);
        assert!(!TrainStage::II.active_losses().contains(&LossTerm::PseudoFocal));
        assert!(TrainStage::I.is_detached(DetachedPath::FullJoints));
        assert!(!TrainStage::II.is_detached(DetachedPath::FullJoints));
    }
}
