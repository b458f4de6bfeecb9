//! Forward-process transition kernels.
//!
//! Convention throughout: entry `(i, j)` of a transition matrix is
//! `P(x_t = i | x_{t-1} = j)`, so columns are distributions and a state
//! distribution evolves as `p_t = Q_t p_{t-1}`. The absorbing state is always
//! the last index.
//!
//! The free functions in this module build dense matrices directly from the
//! kernel formulas. [`Chain`] is the structured form a schedule actually
//! stores; the dense builders double as its reference implementation.

mod chain;
mod schedule;

pub use chain::Chain;
pub use schedule::{
    command_chain, make_schedule, param_chain, ChainId, CommandCoef, EmpiricalPrior, KernelChoice, KernelOverrides, Schedule,
    ScheduleConfig, BOOLEAN_STATES,
};

use ndarray::{Array2, Axis};
use thiserror::Error;

/// Tolerance for column sums of every stochastic matrix.
pub const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("absorbing mass 1 - alpha - K*beta = {0} is negative")]
    NegativeMass(f64),
    #[error("base kernel is not column-stochastic (worst column sum {0})")]
    NonStochasticBase(f64),
    #[error("matrix dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("prior has an empty valid set")]
    EmptyValidSet,
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("infeasible schedule: {0}")]
    InfeasibleSchedule(String),
    #[error("kernel `{choice:?}` cannot be used for {kind} parameters")]
    UnsupportedKernel { choice: KernelChoice, kind: String },
}

/// Dense column-stochastic operator over `K` valid states plus one absorbing
/// state at index `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    entries: Array2<f64>,
}

impl TransitionMatrix {
    pub fn from_array(entries: Array2<f64>) -> Result<Self, KernelError> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(KernelError::DimensionMismatch(r, c));
        }
        Ok(Self { entries })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: Array2::eye(n),
        }
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn absorbing(&self) -> usize {
        self.size() - 1
    }

    pub fn entry(&self, to: usize, from: usize) -> f64 {
        self.entries[[to, from]]
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn column(&self, from: usize) -> Vec<f64> {
        self.entries.column(from).to_vec()
    }

    /// Largest deviation of any column sum from 1.
    pub fn max_column_error(&self) -> f64 {
        column_error(&self.entries)
    }

    pub fn min_entry(&self) -> f64 {
        self.entries.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn matmul(&self, rhs: &TransitionMatrix) -> Result<TransitionMatrix, KernelError> {
        if self.size() != rhs.size() {
            return Err(KernelError::DimensionMismatch(self.size(), rhs.size()));
        }
        Ok(TransitionMatrix {
            entries: self.entries.dot(&rhs.entries),
        })
    }
}

pub(crate) fn column_error(m: &Array2<f64>) -> f64 {
    m.sum_axis(Axis(0))
        .iter()
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Uniform-plus-absorbing command kernel over `k` commands: `alpha + beta` on
/// the diagonal, `beta` elsewhere in the valid block, and the remaining
/// `gamma = 1 - alpha - k*beta` sent to the absorbing state.
pub fn build_command_matrix(
    alpha: f64,
    beta: f64,
    k: usize,
) -> Result<TransitionMatrix, KernelError> {
    let gamma = 1.0 - alpha - k as f64 * beta;
    if gamma < -1e-15 || alpha < 0.0 || beta < 0.0 {
        return Err(KernelError::NegativeMass(gamma));
    }
    let gamma = gamma.max(0.0);
    let mut m = Array2::zeros((k + 1, k + 1));
    for j in 0..k {
        for i in 0..k {
            m[[i, j]] = if i == j { alpha + beta } else { beta };
        }
        m[[k, j]] = gamma;
    }
    m[[k, k]] = 1.0;
    Ok(TransitionMatrix { entries: m })
}

fn normalized_kernel(k: usize, weight: impl Fn(usize, usize) -> f64) -> Array2<f64> {
    let mut m = Array2::zeros((k, k));
    for j in 0..k {
        let mut col: Vec<f64> = (0..k).map(|i| weight(i, j)).collect();
        let z: f64 = col.iter().sum();
        col.iter_mut().for_each(|w| *w /= z);
        for (i, w) in col.into_iter().enumerate() {
            m[[i, j]] = w;
        }
    }
    m
}

fn mix_identity(mut m: Array2<f64>, alpha: f64) -> Array2<f64> {
    m.mapv_inplace(|v| (1.0 - alpha) * v);
    for d in 0..m.nrows() {
        m[[d, d]] += alpha;
    }
    m
}

/// Discretized Gaussian kernel with variance `sigma2`, columns normalized,
/// mixed with the identity by `alpha`.
pub fn build_gaussian_base(k: usize, sigma2: f64, alpha: f64) -> Array2<f64> {
    let g = normalized_kernel(k, |i, j| {
        let d = i as f64 - j as f64;
        (-d * d / (2.0 * sigma2)).exp()
    });
    mix_identity(g, alpha)
}

/// Relative-distance kernel `exp(-mu ((i-j)/(i+j))^2)` evaluated on the
/// 1-based values `1..=k`, columns normalized, mixed with the identity.
pub fn build_scale_base(k: usize, mu: f64, alpha: f64) -> Array2<f64> {
    let g = normalized_kernel(k, |i, j| scale_weight(i + 1, j + 1, mu));
    mix_identity(g, alpha)
}

/// Unnormalized scale-invariant weight between 1-based values `a` and `b`.
pub fn scale_weight(a: usize, b: usize, mu: f64) -> f64 {
    let r = (a as f64 - b as f64) / (a as f64 + b as f64);
    (-mu * r * r).exp()
}

/// `(1 - alpha)/k + alpha * delta_ij`.
pub fn build_uniform_base(k: usize, alpha: f64) -> Array2<f64> {
    mix_identity(Array2::from_elem((k, k), 1.0 / k as f64), alpha)
}

/// Prior-preserving kernel: valid columns keep their state with probability
/// `alpha` and otherwise resample from the prior; invalid columns are
/// projected onto the prior outright. Rows outside the valid set are zero.
pub fn build_prior_base(
    prior: &EmpiricalPrior,
    alpha: f64,
    k: usize,
) -> Result<Array2<f64>, KernelError> {
    if prior.valid().is_empty() {
        return Err(KernelError::EmptyValidSet);
    }
    let mut m = Array2::zeros((k, k));
    for j in 0..k {
        let j_valid = prior.contains(j);
        for (&i, &p) in prior.valid().iter().zip(prior.probs()) {
            m[[i, j]] = match (j_valid, i == j) {
                (true, true) => alpha + (1.0 - alpha) * p,
                (true, false) => (1.0 - alpha) * p,
                (false, _) => p,
            };
        }
    }
    Ok(m)
}

/// Embeds a `k x k` base kernel into `(k+1) x (k+1)` with absorbing rate
/// `gamma`: `[[(1-gamma) base, 0], [gamma 1^T, 1]]`.
pub fn wrap_absorbing(base: &Array2<f64>, gamma: f64) -> Result<TransitionMatrix, KernelError> {
    let err = column_error(base);
    let negative = base.iter().any(|&v| v < 0.0);
    if err > STOCHASTIC_TOL || negative {
        return Err(KernelError::NonStochasticBase(err));
    }
    let k = base.nrows();
    let mut m = Array2::zeros((k + 1, k + 1));
    m.slice_mut(ndarray::s![..k, ..k])
        .assign(&base.mapv(|v| (1.0 - gamma) * v));
    for j in 0..k {
        m[[k, j]] = gamma;
    }
    m[[k, k]] = 1.0;
    Ok(TransitionMatrix { entries: m })
}

/// Cumulative products `Qbar_1 = Q_1`, `Qbar_t = Q_t Qbar_{t-1}`, so that
/// `Qbar_t e_{x0}` is the t-step marginal under the column convention.
pub fn accumulate(steps: &[TransitionMatrix]) -> Result<Vec<TransitionMatrix>, KernelError> {
    let mut out: Vec<TransitionMatrix> = Vec::with_capacity(steps.len());
    for q in steps {
        let next = match out.last() {
            None => q.clone(),
            Some(prev) => q.matmul(prev)?,
        };
        out.push(next);
    }
    Ok(out)
}
