use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Cascade, EngineError, TrainConfig, Trainer};
use crate::cadseq::CadSequence;
use crate::denoiser::nn::Tensors;
use crate::denoiser::{Adam, CommandNet, DenoiserConfig, ParamNet};
use crate::kernels::{make_schedule, EmpiricalPrior, Schedule, ScheduleConfig};

pub const CHECKPOINT_FORMAT: &str = "cadiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or to sample.
///
/// Weights are stored per tensor as `{name, shape: [rows, cols], data}` with
/// `data` in row-major order. Random state is not stored: every stream is
/// derived from `train.seed` and the iteration counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub schedule: ScheduleConfig,
    pub prior: EmpiricalPrior,
    pub net: DenoiserConfig,
    pub train: TrainConfig,
    pub iteration: u64,
    pub cmd_weights: Tensors,
    pub param_weights: Tensors,
    pub cmd_opt: Adam,
    pub param_opt: Adam,
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        let sched = &tr.cascade.schedule;
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            schedule: sched.config().clone(),
            prior: sched.prior().clone(),
            net: tr.cascade.net_config().clone(),
            train: tr.config.clone(),
            iteration: tr.iteration,
            cmd_weights: tr.cascade.cmd.params.clone(),
            param_weights: tr.cascade.param.params.clone(),
            cmd_opt: tr.cmd_opt.clone(),
            param_opt: tr.param_opt.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let ck: Self =
            serde_json::from_str(text).map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(EngineError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(EngineError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn build_schedule(&self) -> Result<Arc<Schedule>, EngineError> {
        Ok(Arc::new(make_schedule(&self.schedule, &self.prior)?))
    }

    /// Nets with the stored weights on an already built schedule.
    pub fn cascade_with(&self, schedule: Arc<Schedule>) -> Result<Cascade, EngineError> {
        if schedule.config() != &self.schedule || schedule.prior() != &self.prior {
            return Err(EngineError::Checkpoint(
                "schedule differs from the one the checkpoint was trained with".into(),
            ));
        }
        Ok(Cascade {
            schedule,
            cmd: CommandNet::from_params(&self.net, self.cmd_weights.clone())?,
            param: ParamNet::from_params(&self.net, self.param_weights.clone())?,
        })
    }

    pub fn cascade(&self) -> Result<Cascade, EngineError> {
        self.cascade_with(self.build_schedule()?)
    }

    /// Resumes training. `train` overrides the stored training config, e.g.
    /// to extend the iteration budget.
    pub fn trainer(
        &self,
        corpus: &[CadSequence],
        train: Option<TrainConfig>,
    ) -> Result<Trainer, EngineError> {
        let train = train.unwrap_or_else(|| self.train.clone());
        if train.seed != self.train.seed {
            return Err(EngineError::Checkpoint("resumed run must keep the seed".into()));
        }
        let mut cmd_opt = self.cmd_opt.clone();
        let mut param_opt = self.param_opt.clone();
        cmd_opt.config.lr = train.lr;
        param_opt.config.lr = train.lr;
        Trainer::resume(
            self.cascade()?,
            corpus,
            train,
            cmd_opt,
            param_opt,
            self.iteration,
        )
    }
}
