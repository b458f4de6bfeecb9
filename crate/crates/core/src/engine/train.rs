use std::sync::Arc;
use std::time::Instant;

use log::debug;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::diffusion::{forward_sample, kl_loss_grad};
use super::{EngineError, PosKind, TokenSeq};
use crate::cadseq::{CadSequence, CommandKind};
use crate::denoiser::nn::Tensors;
use crate::denoiser::{
    Adam, AdamConfig, CommandNet, ConditionMode, DenoiserConfig, DenoiserError, ParamLayout,
    ParamNet,
};
use crate::kernels::{make_schedule, EmpiricalPrior, Schedule, ScheduleConfig};
use crate::par::{map_range, Exec};
use crate::rng::substream;

pub(crate) const STREAM_INIT: u64 = 0x1417;
const STREAM_BATCH: u64 = 1;
const STREAM_EXAMPLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Mandatory: every random draw derives from it.
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub iterations: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: u64,
    /// Weight of the optional x0 cross-entropy term.
    #[serde(default)]
    pub aux_ce_weight: f64,
    /// Examples per gradient group. Groups are reduced in a fixed order, so
    /// results do not depend on the execution backend.
    #[serde(default = "default_chunk")]
    pub grad_chunk: usize,
}

fn default_lr() -> f64 {
    4e-5
}
fn default_batch() -> usize {
    64
}
fn default_chunk() -> usize {
    8
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            lr: default_lr(),
            batch_size: default_batch(),
            iterations: 0,
            checkpoint_interval: 0,
            aux_ce_weight: 0.0,
            grad_chunk: default_chunk(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub t_mean: f64,
    pub loss_cmd: f64,
    pub loss_param: f64,
    /// Seconds since the trainer was created.
    pub wallclock: f64,
}

/// Both denoisers together with the schedule they were trained under.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub schedule: Arc<Schedule>,
    pub cmd: CommandNet,
    pub param: ParamNet,
}

impl Cascade {
    /// Freshly initialized nets; weights depend only on `seed`.
    pub fn new(
        schedule: Arc<Schedule>,
        net: &DenoiserConfig,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let mut rng = substream(seed, &[STREAM_INIT]);
        let cmd = CommandNet::new(net, &mut rng)?;
        let param = ParamNet::new(net, &mut rng)?;
        Ok(Self {
            schedule,
            cmd,
            param,
        })
    }

    /// Builds the schedule with the boolean prior estimated from `corpus`.
    pub fn for_corpus(
        schedule: &ScheduleConfig,
        net: &DenoiserConfig,
        corpus: &[CadSequence],
        seed: u64,
    ) -> Result<Self, EngineError> {
        let prior = EmpiricalPrior::boolean_from_corpus(corpus);
        let schedule = Arc::new(make_schedule(schedule, &prior)?);
        Self::new(schedule, net, seed)
    }

    pub fn net_config(&self) -> &DenoiserConfig {
        self.cmd.config()
    }

    pub fn is_conditional(&self) -> bool {
        self.net_config().condition == ConditionMode::Length
    }
}

/// A training sequence in chain-state form.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Command ids padded with EOS to `max_cmd_len`.
    pub commands: TokenSeq,
    /// Command count, terminator included.
    pub length: usize,
    /// Effective parameter tokens, no padding.
    pub params: TokenSeq,
    pub layout: ParamLayout,
}

pub fn encode_example(seq: &CadSequence, net: &DenoiserConfig) -> Result<Example, EngineError> {
    if seq.len() > net.max_cmd_len {
        return Err(DenoiserError::LengthExceeded {
            got: seq.len(),
            max: net.max_cmd_len,
        }
        .into());
    }
    if seq.param_count() > net.max_param_len {
        return Err(DenoiserError::LengthExceeded {
            got: seq.param_count(),
            max: net.max_param_len,
        }
        .into());
    }
    let mut cmd: Vec<usize> = seq.kinds().map(CommandKind::id).collect();
    cmd.resize(net.max_cmd_len, CommandKind::Eos.id());
    let kinds: Vec<CommandKind> = seq.kinds().collect();
    let layout = ParamLayout::from_commands(&kinds);
    let mut states = Vec::with_capacity(layout.len());
    let mut pkinds = Vec::with_capacity(layout.len());
    for c in seq.commands() {
        for slot in c.slots() {
            states.push(slot.value as usize);
            pkinds.push(PosKind::for_param(slot.kind));
        }
    }
    Ok(Example {
        commands: TokenSeq::commands(cmd),
        length: seq.len(),
        params: TokenSeq::new(states, pkinds)?,
        layout,
    })
}

struct ExampleGrad {
    t: usize,
    kl_cmd: f64,
    n_cmd: usize,
    kl_param: f64,
    n_param: usize,
    g_cmd: Tensors,
    g_param: Tensors,
}

fn example_grad(
    cascade: &Cascade,
    ex: &Example,
    aux: f64,
    mut rng: impl RngCore,
    mut drop_rng: Option<impl RngCore>,
) -> Result<ExampleGrad, EngineError> {
    let schedule = &cascade.schedule;
    let t = rng.random_range(1..=schedule.steps());
    let cond = cascade.is_conditional().then_some(ex.length);

    let zeta_t = forward_sample(&ex.commands, t, schedule, &mut rng)?;
    let (logits, cache) = cascade.cmd.forward(
        &zeta_t.states,
        t,
        cond,
        drop_rng.as_mut().map(|r| r as &mut dyn RngCore),
    )?;
    let lc = kl_loss_grad(&ex.commands, t, &zeta_t, logits.view(), schedule, aux)?;
    let mut g_cmd = cascade.cmd.params.zeros_like();
    cascade.cmd.backward(&cache, lc.dlogits.view(), &mut g_cmd);

    let mut g_param = cascade.param.params.zeros_like();
    let (mut kl_param, mut n_param) = (0.0, 0);
    if !ex.params.is_empty() {
        let theta_t = forward_sample(&ex.params, t, schedule, &mut rng)?;
        let (logits, cache) = cascade.param.forward(
            &theta_t.states,
            &ex.layout,
            t,
            drop_rng.as_mut().map(|r| r as &mut dyn RngCore),
        )?;
        let lp = kl_loss_grad(&ex.params, t, &theta_t, logits.view(), schedule, aux)?;
        cascade.param.backward(&cache, lp.dlogits.view(), &mut g_param);
        kl_param = lp.kl_sum;
        n_param = lp.positions;
    }
    Ok(ExampleGrad {
        t,
        kl_cmd: lc.kl_sum,
        n_cmd: lc.positions,
        kl_param,
        n_param,
        g_cmd,
        g_param,
    })
}

/// Joint training state of both stages (Adam moments included).
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cascade: Cascade,
    pub config: TrainConfig,
    pub cmd_opt: Adam,
    pub param_opt: Adam,
    /// Completed iterations.
    pub iteration: u64,
    pub exec: Exec,
    corpus: Vec<Example>,
    started: Instant,
}

impl Trainer {
    pub fn new(
        cascade: Cascade,
        corpus: &[CadSequence],
        config: TrainConfig,
    ) -> Result<Self, EngineError> {
        let adam = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        let cmd_opt = Adam::new(adam, &cascade.cmd.params);
        let param_opt = Adam::new(adam, &cascade.param.params);
        Self::resume(cascade, corpus, config, cmd_opt, param_opt, 0)
    }

    /// Continues from saved optimizer state after `iteration` iterations.
    pub fn resume(
        cascade: Cascade,
        corpus: &[CadSequence],
        config: TrainConfig,
        cmd_opt: Adam,
        param_opt: Adam,
        iteration: u64,
    ) -> Result<Self, EngineError> {
        if corpus.is_empty() {
            return Err(EngineError::EmptyDataset);
        }
        if config.batch_size == 0 || config.grad_chunk == 0 {
            return Err(EngineError::Shape("batch_size and grad_chunk must be positive".into()));
        }
        if !cmd_opt.matches(&cascade.cmd.params) || !param_opt.matches(&cascade.param.params) {
            return Err(EngineError::Checkpoint("optimizer state does not match the nets".into()));
        }
        let net = cascade.net_config().clone();
        let corpus = corpus
            .iter()
            .map(|s| encode_example(s, &net))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cascade,
            config,
            cmd_opt,
            param_opt,
            iteration,
            exec: Exec::default(),
            corpus,
            started: Instant::now(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// One Adam update of both nets on a fresh batch.
    pub fn step(&mut self) -> Result<LogRecord, EngineError> {
        let cfg = &self.config;
        let iter = self.iteration;
        let mut brng = substream(cfg.seed, &[iter, STREAM_BATCH]);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| brng.random_range(0..self.corpus.len()))
            .collect();
        let dropout = self.cascade.net_config().dropout > 0.0;

        let mut g_cmd = self.cascade.cmd.params.zeros_like();
        let mut g_param = self.cascade.param.params.zeros_like();
        let (mut kl_cmd, mut n_cmd, mut kl_param, mut n_param, mut t_sum) = (0.0, 0, 0.0, 0, 0);
        for (c, chunk) in batch.chunks(cfg.grad_chunk).enumerate() {
            let base = c * cfg.grad_chunk;
            let results = map_range(self.exec, chunk.len(), |j| {
                let b = (base + j) as u64;
                let rng = substream(cfg.seed, &[iter, STREAM_EXAMPLE, b]);
                let drop_rng = dropout.then(|| substream(cfg.seed, &[iter, STREAM_DROPOUT, b]));
                example_grad(
                    &self.cascade,
                    &self.corpus[chunk[j]],
                    cfg.aux_ce_weight,
                    rng,
                    drop_rng,
                )
            });
            for r in results {
                let r = r?;
                g_cmd.add_assign(&r.g_cmd);
                g_param.add_assign(&r.g_param);
                kl_cmd += r.kl_cmd;
                n_cmd += r.n_cmd;
                kl_param += r.kl_param;
                n_param += r.n_param;
                t_sum += r.t;
            }
        }
        let loss_cmd = kl_cmd / n_cmd.max(1) as f64;
        let loss_param = kl_param / n_param.max(1) as f64;
        if !loss_cmd.is_finite() || !loss_param.is_finite() {
            return Err(EngineError::NonFiniteLoss {
                iter: iter + 1,
                loss_cmd,
                loss_param,
            });
        }
        g_cmd.scale(1.0 / n_cmd.max(1) as f64);
        g_param.scale(1.0 / n_param.max(1) as f64);
        self.cmd_opt.update(&mut self.cascade.cmd.params, &g_cmd)?;
        self.param_opt.update(&mut self.cascade.param.params, &g_param)?;
        self.iteration += 1;
        let rec = LogRecord {
            iter: self.iteration,
            t_mean: t_sum as f64 / batch.len() as f64,
            loss_cmd,
            loss_param,
            wallclock: self.started.elapsed().as_secs_f64(),
        };
        debug!(
            "iter {} t_mean {:.1} loss_cmd {:.5} loss_param {:.5}",
            rec.iter, rec.t_mean, rec.loss_cmd, rec.loss_param
        );
        Ok(rec)
    }

    /// Runs until `iteration == until`, calling `on_step` after each update.
    pub fn run_until<F>(&mut self, until: u64, mut on_step: F) -> Result<Vec<LogRecord>, EngineError>
    where
        F: FnMut(&Trainer, &LogRecord) -> Result<(), EngineError>,
    {
        let mut log = Vec::new();
        while self.iteration < until {
            let rec = self.step()?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }

    pub fn corpus(&self) -> &[Example] {
        &self.corpus
    }
}
