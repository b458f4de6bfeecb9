use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    build_gaussian_base, build_prior_base, build_scale_base, build_uniform_base, Chain,
    KernelError,
};
use crate::cadseq::{CadSequence, ParamKind, SlotName, NUM_COMMANDS, NUM_LEVELS};

/// Valid states of the boolean chain: the union of the `f`, `b` and `u`
/// domains.
pub const BOOLEAN_STATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Gaussian,
    Scale,
    Prior,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelOverrides {
    #[serde(default = "default_coord")]
    pub coordinate: KernelChoice,
    #[serde(default = "default_dim")]
    pub dimensional: KernelChoice,
    #[serde(default = "default_bool")]
    pub boolean: KernelChoice,
}

fn default_coord() -> KernelChoice {
    KernelChoice::Gaussian
}
fn default_dim() -> KernelChoice {
    KernelChoice::Scale
}
fn default_bool() -> KernelChoice {
    KernelChoice::Prior
}

impl Default for KernelOverrides {
    fn default() -> Self {
        Self {
            coordinate: default_coord(),
            dimensional: default_dim(),
            boolean: default_bool(),
        }
    }
}

impl KernelOverrides {
    /// Every parameter kind corrupted by the uniform kernel.
    pub fn all_uniform() -> Self {
        Self {
            coordinate: KernelChoice::Uniform,
            dimensional: KernelChoice::Uniform,
            boolean: KernelChoice::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    /// Final self-preservation weight of the parameter base kernels.
    pub alpha_min: f64,
    /// Command-chain uniform mass per step as a fraction of the absorbing rate.
    pub beta_ratio: f64,
    /// Cumulative absorbing mass is `(t/T)^gamma_exponent`.
    pub gamma_exponent: f64,
    /// Variance of the coordinate kernel.
    pub sigma2: f64,
    /// Smoothness of the dimensional kernel.
    pub mu: f64,
    #[serde(default)]
    pub kernels: KernelOverrides,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            alpha_min: 0.2,
            beta_ratio: 0.1,
            gamma_exponent: 2.0,
            sigma2: 2.0,
            mu: 1.0,
            kernels: KernelOverrides::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn check(&self) -> Result<(), KernelError> {
        let bad = |m: String| Err(KernelError::InfeasibleSchedule(m));
        if self.steps == 0 {
            return bad("T must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha_min) {
            return bad(format!("alpha_min {} outside [0, 1]", self.alpha_min));
        }
        if !(self.beta_ratio >= 0.0 && self.beta_ratio.is_finite()) {
            return bad(format!("beta_ratio {} must be >= 0", self.beta_ratio));
        }
        if !(self.gamma_exponent > 0.0 && self.gamma_exponent.is_finite()) {
            return bad(format!("gamma_exponent {} must be > 0", self.gamma_exponent));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 {} must be > 0", self.sigma2));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu {} must be > 0", self.mu));
        }
        if self.kernels.coordinate == KernelChoice::Prior
            || self.kernels.dimensional == KernelChoice::Prior
        {
            return Err(KernelError::UnsupportedKernel {
                choice: KernelChoice::Prior,
                kind: "non-boolean".into(),
            });
        }
        Ok(())
    }
}

/// Empirical distribution over a fixed set of valid tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPrior {
    valid: Vec<usize>,
    probs: Vec<f64>,
}

impl EmpiricalPrior {
    pub fn new(valid: Vec<usize>, probs: Vec<f64>) -> Result<Self, KernelError> {
        if valid.is_empty() {
            return Err(KernelError::EmptyValidSet);
        }
        if valid.len() != probs.len() {
            return Err(KernelError::InvalidPrior("length mismatch".into()));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|&p| p.is_nan() || p < 0.0) || (total - 1.0).abs() > 1e-12 {
            return Err(KernelError::InvalidPrior(format!(
                "probabilities must be non-negative and sum to 1 (sum {total})"
            )));
        }
        let mut sorted = valid.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != valid.len() {
            return Err(KernelError::InvalidPrior("duplicate valid state".into()));
        }
        Ok(Self { valid, probs })
    }

    /// Normalized counts; falls back to uniform when every count is zero.
    pub fn from_counts(valid: Vec<usize>, counts: &[u64]) -> Result<Self, KernelError> {
        if valid.is_empty() {
            return Err(KernelError::EmptyValidSet);
        }
        let total: u64 = counts.iter().sum();
        let probs = if total == 0 {
            vec![1.0 / valid.len() as f64; valid.len()]
        } else {
            counts.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self::new(valid, probs)
    }

    pub fn uniform(valid: Vec<usize>) -> Result<Self, KernelError> {
        let n = valid.len();
        Self::from_counts(valid, &vec![0; n])
    }

    /// Boolean-slot prior estimated from corpus counts of `f`, `b` and `u`.
    pub fn boolean_from_corpus(corpus: &[CadSequence]) -> Self {
        let mut counts = [0u64; BOOLEAN_STATES];
        for seq in corpus {
            for cmd in seq.commands() {
                for slot in cmd.slots() {
                    if slot.kind == ParamKind::Boolean && (slot.value as usize) < BOOLEAN_STATES
                    {
                        counts[slot.value as usize] += 1;
                    }
                }
            }
        }
        Self::from_counts((0..BOOLEAN_STATES).collect(), &counts).expect("non-empty valid set")
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn contains(&self, state: usize) -> bool {
        self.valid.contains(&state)
    }
}

/// Selects which forward chain corrupts a position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChainId {
    Command,
    Coordinate,
    Dimensional,
    Boolean,
}

impl ChainId {
    pub fn for_param(kind: ParamKind) -> Self {
        match kind {
            ParamKind::Coordinate => ChainId::Coordinate,
            ParamKind::Dimensional => ChainId::Dimensional,
            ParamKind::Boolean => ChainId::Boolean,
        }
    }

    pub const PARAMS: [ChainId; 3] = [ChainId::Coordinate, ChainId::Dimensional, ChainId::Boolean];
}

/// Per-step coefficients of the command kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandCoef {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// All forward chains of both cascade stages. Immutable once built.
#[derive(Debug, Clone)]
pub struct Schedule {
    config: ScheduleConfig,
    prior: EmpiricalPrior,
    command_coef: Vec<CommandCoef>,
    command: Arc<Chain>,
    coordinate: Arc<Chain>,
    dimensional: Arc<Chain>,
    boolean: Arc<Chain>,
}

impl ScheduleConfig {
    /// `c_t`, the probability of not being absorbed after `t` steps, for
    /// `t` in `0..=T`: `1 - (t/T)^gamma_exponent`.
    pub fn survival_curve(&self) -> Vec<f64> {
        let steps = self.steps;
        (0..=steps)
            .map(|t| 1.0 - (t as f64 / steps as f64).powf(self.gamma_exponent))
            .collect()
    }

    /// Self-preservation weight `a_t` of the parameter base kernels for `t`
    /// in `1..=T`, falling linearly from 1 to `alpha_min`.
    pub fn keep_curve(&self) -> Vec<f64> {
        let steps = self.steps as f64;
        (1..=self.steps)
            .map(|t| 1.0 - (1.0 - self.alpha_min) * t as f64 / steps)
            .collect()
    }
}

/// Command-style chain over `k` valid states: per step `alpha_t` stays,
/// `beta_t` moves to each state uniformly, `gamma_t` is absorbed. The uniform
/// share is `beta_ratio * gamma_t`, capped so that `alpha_t >= 0`.
pub fn command_chain(
    config: &ScheduleConfig,
    k: usize,
) -> Result<(Chain, Vec<CommandCoef>), KernelError> {
    config.check()?;
    if k == 0 {
        return Err(KernelError::EmptyValidSet);
    }
    let steps = config.steps;
    let survive = config.survival_curve();
    let kf = k as f64;
    let mut coef = Vec::with_capacity(steps + 1);
    coef.push(CommandCoef {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    });
    let mut keep = Vec::with_capacity(steps);
    for t in 1..=steps {
        let gamma = 1.0 - survive[t] / survive[t - 1];
        let beta = (config.beta_ratio * gamma).min((1.0 - gamma) / kf);
        let alpha = (1.0 - gamma - kf * beta).max(0.0);
        for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(KernelError::InfeasibleSchedule(format!(
                    "command {name}_{t} = {v}"
                )));
            }
        }
        coef.push(CommandCoef { alpha, beta, gamma });
        keep.push(if gamma < 1.0 { alpha / (1.0 - gamma) } else { 0.0 });
    }
    let chain = Chain::new(
        Array2::from_elem((k, k), 1.0 / kf),
        vec![true; k],
        &keep,
        survive,
    )?;
    Ok((chain, coef))
}

/// Parameter chain over `k` valid states with base kernel `choice`. The
/// prior-preserving kernel needs `prior`, whose valid set must lie in `0..k`.
pub fn param_chain(
    config: &ScheduleConfig,
    choice: KernelChoice,
    k: usize,
    prior: Option<&EmpiricalPrior>,
) -> Result<Chain, KernelError> {
    config.check()?;
    if k == 0 {
        return Err(KernelError::EmptyValidSet);
    }
    let (kernel, keep) = match choice {
        KernelChoice::Gaussian => (build_gaussian_base(k, config.sigma2, 0.0), vec![true; k]),
        KernelChoice::Scale => (build_scale_base(k, config.mu, 0.0), vec![true; k]),
        KernelChoice::Uniform => (build_uniform_base(k, 0.0), vec![true; k]),
        KernelChoice::Prior => {
            let prior = prior.ok_or(KernelError::EmptyValidSet)?;
            if prior.valid().iter().any(|&s| s >= k) {
                return Err(KernelError::InvalidPrior(format!(
                    "valid set must lie in 0..{k}"
                )));
            }
            (
                build_prior_base(prior, 0.0, k)?,
                (0..k).map(|s| prior.contains(s)).collect(),
            )
        }
    };
    Chain::new(kernel, keep, &config.keep_curve(), config.survival_curve())
}

/// Builds every chain for `config`.
///
/// Cumulative absorbing mass follows `(t/T)^gamma_exponent` exactly. The
/// parameter chains run on the 256 value levels; the boolean chain uses the
/// prior-preserving kernel with valid set `0..4` by default.
pub fn make_schedule(
    config: &ScheduleConfig,
    prior: &EmpiricalPrior,
) -> Result<Schedule, KernelError> {
    config.check()?;
    if prior.valid().iter().any(|&s| s >= BOOLEAN_STATES) {
        return Err(KernelError::InvalidPrior(format!(
            "boolean prior must live on 0..{BOOLEAN_STATES}"
        )));
    }
    let (command, command_coef) = command_chain(config, NUM_COMMANDS)?;
    let mut built: Vec<(KernelChoice, Arc<Chain>)> = Vec::new();
    let mut chain_for = |choice: KernelChoice| -> Result<Arc<Chain>, KernelError> {
        if let Some((_, c)) = built.iter().find(|(k, _)| *k == choice) {
            return Ok(Arc::clone(c));
        }
        let chain = Arc::new(param_chain(config, choice, NUM_LEVELS, Some(prior))?);
        built.push((choice, Arc::clone(&chain)));
        Ok(chain)
    };
    let coordinate = chain_for(config.kernels.coordinate)?;
    let dimensional = chain_for(config.kernels.dimensional)?;
    let boolean = chain_for(config.kernels.boolean)?;

    Ok(Schedule {
        config: config.clone(),
        prior: prior.clone(),
        command_coef,
        command: Arc::new(command),
        coordinate,
        dimensional,
        boolean,
    })
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn prior(&self) -> &EmpiricalPrior {
        &self.prior
    }

    pub fn chain(&self, id: ChainId) -> &Chain {
        match id {
            ChainId::Command => &self.command,
            ChainId::Coordinate => &self.coordinate,
            ChainId::Dimensional => &self.dimensional,
            ChainId::Boolean => &self.boolean,
        }
    }

    /// `(alpha_t, beta_t, gamma_t)` of the command kernel; `t = 0` is the identity.
    pub fn command_coef(&self, t: usize) -> CommandCoef {
        self.command_coef[t]
    }

    /// Chain that corrupts a given slot. All boolean slots share one chain.
    pub fn chain_for_slot(&self, slot: SlotName) -> ChainId {
        ChainId::for_param(slot.kind())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_command_matrix, STOCHASTIC_TOL};
    use approx::assert_abs_diff_eq;

    fn prior() -> EmpiricalPrior {
        EmpiricalPrior::new(vec![0, 1, 2, 3], vec![0.5, 0.3, 0.15, 0.05]).unwrap()
    }

    #[test]
    fn single_step_absorbs_everything() {
        let s = make_schedule(&ScheduleConfig::default().with_steps(1), &prior()).unwrap();
        for id in [ChainId::Command, ChainId::Coordinate, ChainId::Dimensional, ChainId::Boolean] {
            let c = s.chain(id);
            assert_eq!(c.absorb_rate(1), 1.0);
            assert_eq!(c.absorbed_mass(1), 1.0);
        }
    }

    #[test]
    fn quadratic_cumulative_mass() {
        let s = make_schedule(&ScheduleConfig::default().with_steps(10), &prior()).unwrap();
        let c = s.chain(ChainId::Command);
        assert_abs_diff_eq!(c.absorbed_mass(5), 0.25, epsilon = 1e-15);
        assert_eq!(c.absorbed_mass(10), 1.0);
        // mass of the structured cumulative matrix agrees with the closed form
        for t in 1..=10 {
            let m = c.cumulative_matrix(t);
            for j in 0..6 {
                assert_abs_diff_eq!(m.entry(6, j), (t as f64 / 10.0).powi(2), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn command_steps_match_dense_kernel() {
        let s = make_schedule(&ScheduleConfig::default().with_steps(12), &prior()).unwrap();
        let c = s.chain(ChainId::Command);
        for t in 1..=12 {
            let coef = s.command_coef(t);
            assert_abs_diff_eq!(coef.alpha + 6.0 * coef.beta + coef.gamma, 1.0, epsilon = 1e-14);
            let dense = build_command_matrix(coef.alpha, coef.beta, 6).unwrap();
            let structured = c.step_matrix(t);
            for i in 0..7 {
                for j in 0..7 {
                    assert_abs_diff_eq!(structured.entry(i, j), dense.entry(i, j), epsilon = 1e-14);
                }
            }
        }
        let last = s.command_coef(12);
        assert_eq!((last.alpha, last.beta, last.gamma), (0.0, 0.0, 1.0));
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let p = prior();
        for cfg in [
            ScheduleConfig {
                steps: 0,
                ..Default::default()
            },
            ScheduleConfig {
                alpha_min: 1.5,
                ..Default::default()
            },
            ScheduleConfig {
                beta_ratio: -0.1,
                ..Default::default()
            },
            ScheduleConfig {
                sigma2: 0.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                make_schedule(&cfg, &p),
                Err(KernelError::InfeasibleSchedule(_))
            ));
        }
        let mut cfg = ScheduleConfig::default();
        cfg.kernels.coordinate = KernelChoice::Prior;
        assert!(matches!(
            make_schedule(&cfg, &p),
            Err(KernelError::UnsupportedKernel { .. })
        ));
    }

    #[test]
    fn uniform_ablation_shares_one_chain() {
        let mut cfg = ScheduleConfig::default().with_steps(4);
        cfg.kernels = KernelOverrides::all_uniform();
        let s = make_schedule(&cfg, &prior()).unwrap();
        assert!(std::ptr::eq(s.chain(ChainId::Coordinate), s.chain(ChainId::Boolean)));
        let m = s.chain(ChainId::Boolean).step_matrix(2);
        assert!(m.max_column_error() < STOCHASTIC_TOL);
    }

    #[test]
    fn prior_from_counts() {
        let p = EmpiricalPrior::from_counts(vec![0, 1], &[7, 3]).unwrap();
        assert_eq!(p.probs(), &[0.7, 0.3]);
        let u = EmpiricalPrior::from_counts(vec![0, 1, 2], &[0, 0, 0]).unwrap();
        assert_abs_diff_eq!(u.probs()[2], 1.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(
            EmpiricalPrior::from_counts(vec![], &[]),
            Err(KernelError::EmptyValidSet)
        ));
        assert!(EmpiricalPrior::new(vec![0, 1], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn config_json_uses_documented_keys() {
        let json = r#"{"T": 50, "alpha_min": 0.2, "beta_ratio": 0.1, "gamma_exponent": 2.0,
            "sigma2": 2.0, "mu": 1.0, "kernels": {"coordinate": "uniform"}}"#;
        let cfg: ScheduleConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.kernels.coordinate, KernelChoice::Uniform);
        assert_eq!(cfg.kernels.dimensional, KernelChoice::Scale);
    }
}
