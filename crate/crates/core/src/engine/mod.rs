//! Forward corruption, exact posteriors, the x0-parameterized reverse step,
//! the KL objective, and the training and sampling loops of the cascade.

mod checkpoint;
mod diffusion;
mod sample;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use diffusion::{
    chain_forward_sample, chain_kl_grad, chain_posterior, chain_reverse_dist, forward_sample,
    kl_loss, kl_loss_grad, posterior, reverse_dist, reverse_step, ChainLoss, LossGrad, KL_FLOOR,
};
pub use sample::{decode_commands, sample, SampleConfig};
pub use train::{encode_example, Cascade, Example, LogRecord, TrainConfig, Trainer};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cadseq::{CadSeqError, ParamKind};
use crate::denoiser::DenoiserError;
use crate::kernels::{ChainId, KernelError, Schedule};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("step {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("impossible triple: x_t = {x_t}, x0 = {x0} at t = {t}")]
    ZeroMass { x_t: usize, x0: usize, t: usize },
    #[error("clean data holds the absorbing state at position {position}")]
    AbsorbingInData { position: usize },
    #[error("state {state} at position {position} outside its chain")]
    BadState { position: usize, state: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("non-finite loss at iteration {iter}: command {loss_cmd}, parameter {loss_param}")]
    NonFiniteLoss {
        iter: u64,
        loss_cmd: f64,
        loss_param: f64,
    },
    #[error("could not decode sample: {0}")]
    DecodeFailure(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    CadSeq(#[from] CadSeqError),
}

/// Which chain corrupts a position, or none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PosKind {
    Command,
    Coordinate,
    Dimensional,
    Boolean,
    /// Never modified by forward or reverse steps.
    Clamped,
}

impl PosKind {
    pub fn chain(self) -> Option<ChainId> {
        match self {
            PosKind::Command => Some(ChainId::Command),
            PosKind::Coordinate => Some(ChainId::Coordinate),
            PosKind::Dimensional => Some(ChainId::Dimensional),
            PosKind::Boolean => Some(ChainId::Boolean),
            PosKind::Clamped => None,
        }
    }

    pub fn for_param(kind: ParamKind) -> Self {
        match kind {
            ParamKind::Coordinate => PosKind::Coordinate,
            ParamKind::Dimensional => PosKind::Dimensional,
            ParamKind::Boolean => PosKind::Boolean,
        }
    }
}

/// A token sequence in chain-state space. Command states are `0..=6` and
/// parameter states `0..=256`, the last index being absorbing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub states: Vec<usize>,
    pub kinds: Vec<PosKind>,
}

impl TokenSeq {
    pub fn new(states: Vec<usize>, kinds: Vec<PosKind>) -> Result<Self, EngineError> {
        if states.len() != kinds.len() {
            return Err(EngineError::Shape(format!(
                "{} states for {} kinds",
                states.len(),
                kinds.len()
            )));
        }
        Ok(Self { states, kinds })
    }

    /// Every position on the command chain.
    pub fn commands(states: Vec<usize>) -> Self {
        let kinds = vec![PosKind::Command; states.len()];
        Self { states, kinds }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of positions that are not clamped.
    pub fn active(&self) -> usize {
        self.kinds.iter().filter(|k| **k != PosKind::Clamped).count()
    }

    pub(crate) fn check(&self, schedule: &Schedule) -> Result<(), EngineError> {
        if self.states.len() != self.kinds.len() {
            return Err(EngineError::Shape("states and kinds differ in length".into()));
        }
        for (i, (&s, k)) in self.states.iter().zip(&self.kinds).enumerate() {
            if let Some(id) = k.chain() {
                if s >= schedule.chain(id).states() {
                    return Err(EngineError::BadState {
                        position: i,
                        state: s,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One probability vector per position over that position's chain states;
/// clamped positions hold an empty vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Vec<Vec<f64>>,
}

