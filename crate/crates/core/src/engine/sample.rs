use serde::{Deserialize, Serialize};

use super::diffusion::reverse_step;
use super::{Cascade, EngineError, PosKind, TokenSeq};
use crate::cadseq::{CadSeqError, CadSequence, Command, CommandKind};
use crate::denoiser::{DenoiserError, ParamLayout};
use crate::par::{map_range, Exec};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub n: usize,
    pub seed: u64,
    /// Requested command count for length-conditioned nets.
    #[serde(default)]
    pub condition: Option<usize>,
}

/// Command kinds of a sampled `zeta_0`. Trailing EOS padding collapses to a
/// single terminator; anything between the first EOS and the last non-EOS
/// command is kept so that validation reports it.
pub fn decode_commands(states: &[usize]) -> Result<Vec<CommandKind>, EngineError> {
    let kinds = states
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            CommandKind::from_id(s).ok_or_else(|| {
                EngineError::DecodeFailure(format!("absorbing symbol at command position {i}"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let end = kinds
        .iter()
        .rposition(|&k| k != CommandKind::Eos)
        .map_or(0, |i| i + 1);
    let mut out = kinds[..end].to_vec();
    if end < kinds.len() {
        out.push(CommandKind::Eos);
    }
    Ok(out)
}

/// Runs the reverse process of both stages for one sequence.
fn sample_one(cascade: &Cascade, seed: u64, index: u64, cond: Option<usize>) -> Result<CadSequence, EngineError> {
    let schedule = &cascade.schedule;
    let net = cascade.net_config();
    let mut rng = substream(seed, &[index]);
    let steps = schedule.steps();

    let absorbing_cmd = schedule.chain(crate::kernels::ChainId::Command).absorbing();
    let mut zeta = TokenSeq::commands(vec![absorbing_cmd; net.max_cmd_len]);
    for t in (1..=steps).rev() {
        let (logits, _) = cascade.cmd.forward(&zeta.states, t, cond, None)?;
        zeta = reverse_step(&zeta, logits.view(), t, schedule, &mut rng)?;
    }
    let kinds = decode_commands(&zeta.states)?;

    let layout = ParamLayout::from_commands(&kinds);
    if layout.len() > net.max_param_len {
        return Err(EngineError::DecodeFailure(format!(
            "{} parameter slots exceed the maximum {}",
            layout.len(),
            net.max_param_len
        )));
    }
    let pkinds: Vec<PosKind> = kinds
        .iter()
        .flat_map(|k| k.layout().iter().map(|s| PosKind::for_param(s.kind())))
        .collect();
    let absorbing = crate::denoiser::PARAM_STATES - 1;
    let mut theta = TokenSeq::new(vec![absorbing; layout.len()], pkinds)?;
    if !theta.is_empty() {
        for t in (1..=steps).rev() {
            let (logits, _) = cascade.param.forward(&theta.states, &layout, t, None)?;
            theta = reverse_step(&theta, logits.view(), t, schedule, &mut rng)?;
        }
    }

    if let Some(i) = theta.states.iter().position(|&v| v == absorbing) {
        return Err(EngineError::DecodeFailure(format!(
            "absorbing symbol at parameter position {i}"
        )));
    }
    let mut values = theta.states.iter();
    let commands = kinds
        .iter()
        .map(|&k| {
            let params: Vec<u8> = values.by_ref().take(k.arity()).map(|&v| v as u8).collect();
            Command::new(k, params)
        })
        .collect::<Result<Vec<_>, CadSeqError>>()?;
    Ok(CadSequence::new(commands))
}

/// Draws `config.n` sequences. Sequence `i` uses its own random stream, so
/// outputs do not depend on `exec`. Failures are reported per sequence.
pub fn sample(
    cascade: &Cascade,
    config: &SampleConfig,
    exec: Exec,
) -> Result<Vec<Result<CadSequence, EngineError>>, EngineError> {
    match (cascade.is_conditional(), config.condition) {
        (true, None) | (false, Some(_)) => return Err(DenoiserError::ConditionMismatch.into()),
        (true, Some(n)) => {
            cascade.cmd.encode_length_condition(n)?;
        }
        _ => {}
    }
    Ok(map_range(exec, config.n, |i| {
        sample_one(cascade, config.seed, i as u64, config.condition)
    }))
}
