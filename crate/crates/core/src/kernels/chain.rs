use ndarray::{Array2, ArrayView2};

use super::{column_error, KernelError, TransitionMatrix, STOCHASTIC_TOL};

/// A forward chain over `k` valid states and one absorbing state, in the
/// factored form every kernel family shares:
///
/// ```text
/// Q_t    = [[(1-g_t) B_t, 0], [g_t 1^T, 1]]
/// B_t    = a_t diag(keep) + G diag(1 - a_t keep)
/// Qbar_t = [[c_t P_t, 0], [(1-c_t) 1^T, 1]],   P_t = B_t P_{t-1},  P_0 = I
/// ```
///
/// `G` is the time-independent column-stochastic kernel, `keep` marks the
/// columns eligible for self-preservation (all of them except invalid states
/// of the prior-preserving kernel), `a_t` is the self-preservation weight and
/// `c_t` the probability of not having been absorbed after `t` steps.
#[derive(Debug, Clone)]
pub struct Chain {
    kernel: Array2<f64>,
    keep: Vec<bool>,
    /// `a_t` at index `t`; index 0 is unused.
    keep_coef: Vec<f64>,
    /// `g_t` at index `t`; index 0 is 0.
    absorb_rate: Vec<f64>,
    /// `c_t` at index `t`; `c_0 = 1`.
    survive: Vec<f64>,
    products: Vec<Array2<f64>>,
}

impl Chain {
    /// `keep_coef[t-1]` is `a_t` and `survive[t]` is `c_t` for `t` in
    /// `1..=T`; `survive[0]` must be 1 and `survive` non-increasing.
    pub fn new(
        kernel: Array2<f64>,
        keep: Vec<bool>,
        keep_coef: &[f64],
        survive: Vec<f64>,
    ) -> Result<Self, KernelError> {
        let k = kernel.nrows();
        if kernel.ncols() != k || keep.len() != k {
            return Err(KernelError::DimensionMismatch(kernel.ncols(), keep.len()));
        }
        let err = column_error(&kernel);
        if err > STOCHASTIC_TOL || kernel.iter().any(|&v| v < 0.0) {
            return Err(KernelError::NonStochasticBase(err));
        }
        let steps = keep_coef.len();
        if survive.len() != steps + 1 || survive[0] != 1.0 {
            return Err(KernelError::InfeasibleSchedule(
                "survival curve must start at 1 and cover every step".into(),
            ));
        }
        for t in 1..=steps {
            let a = keep_coef[t - 1];
            if !(0.0..=1.0).contains(&a) {
                return Err(KernelError::InfeasibleSchedule(format!(
                    "self-preservation weight {a} at step {t}"
                )));
            }
            if !(0.0..=1.0).contains(&survive[t]) || survive[t] > survive[t - 1] {
                return Err(KernelError::InfeasibleSchedule(format!(
                    "survival {} at step {t} after {}",
                    survive[t],
                    survive[t - 1]
                )));
            }
        }

        let mut absorb_rate = vec![0.0; steps + 1];
        for t in 1..=steps {
            absorb_rate[t] = if survive[t - 1] > 0.0 {
                1.0 - survive[t] / survive[t - 1]
            } else {
                1.0
            };
        }
        let mut coef = vec![1.0; steps + 1];
        coef[1..].copy_from_slice(keep_coef);

        let mut products = Vec::with_capacity(steps + 1);
        products.push(Array2::eye(k));
        for &a in &coef[1..] {
            let prev = products.last().expect("P_0 present");
            // B_t P = G (D P) + a diag(keep) P with D = diag(1 - a keep)
            let mut scaled = prev.clone();
            let mut kept = Array2::zeros((k, k));
            for (i, &kp) in keep.iter().enumerate() {
                if kp {
                    scaled.row_mut(i).mapv_inplace(|v| (1.0 - a) * v);
                    kept.row_mut(i).assign(&prev.row(i).mapv(|v| a * v));
                }
            }
            products.push(kernel.dot(&scaled) + kept);
        }

        Ok(Self {
            kernel,
            keep,
            keep_coef: coef,
            absorb_rate,
            survive,
            products,
        })
    }

    /// Number of valid (non-absorbing) states.
    pub fn valid_states(&self) -> usize {
        self.kernel.nrows()
    }

    /// Total states, absorbing included.
    pub fn states(&self) -> usize {
        self.valid_states() + 1
    }

    pub fn absorbing(&self) -> usize {
        self.valid_states()
    }

    pub fn steps(&self) -> usize {
        self.keep_coef.len() - 1
    }

    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    /// Self-preservation weight `a_t` of the base kernel.
    pub fn keep_coef(&self, t: usize) -> f64 {
        self.keep_coef[t]
    }

    /// Per-step absorbing rate `g_t`.
    pub fn absorb_rate(&self, t: usize) -> f64 {
        self.absorb_rate[t]
    }

    /// Probability of not yet being absorbed after `t` steps.
    pub fn survival(&self, t: usize) -> f64 {
        self.survive[t]
    }

    /// Cumulative absorbing mass after `t` steps.
    pub fn absorbed_mass(&self, t: usize) -> f64 {
        1.0 - self.survive[t]
    }

    /// `P_t`, the valid block of `Qbar_t` divided by `c_t`.
    pub fn product(&self, t: usize) -> ArrayView2<'_, f64> {
        self.products[t].view()
    }

    fn base_entry(&self, t: usize, i: usize, j: usize) -> f64 {
        let a = if self.keep[j] { self.keep_coef[t] } else { 0.0 };
        let diag = if i == j { a } else { 0.0 };
        diag + (1.0 - a) * self.kernel[[i, j]]
    }

    /// `Q_t[to, from]`, `t >= 1`.
    pub fn step_entry(&self, t: usize, to: usize, from: usize) -> f64 {
        let k = self.absorbing();
        match (to == k, from == k) {
            (_, true) => (to == k) as u8 as f64,
            (true, false) => self.absorb_rate[t],
            (false, false) => (1.0 - self.absorb_rate[t]) * self.base_entry(t, to, from),
        }
    }

    /// Row `to` of `Q_t`: the likelihood of landing in `to` from each state.
    pub fn step_row(&self, t: usize, to: usize) -> Vec<f64> {
        (0..self.states()).map(|j| self.step_entry(t, to, j)).collect()
    }

    pub fn step_matrix(&self, t: usize) -> TransitionMatrix {
        let n = self.states();
        let m = Array2::from_shape_fn((n, n), |(i, j)| self.step_entry(t, i, j));
        TransitionMatrix::from_array(m).expect("square")
    }

    /// `Qbar_t[to, from]`, with `Qbar_0 = I`.
    pub fn cumulative_entry(&self, t: usize, to: usize, from: usize) -> f64 {
        let k = self.absorbing();
        match (to == k, from == k) {
            (_, true) => (to == k) as u8 as f64,
            (true, false) => 1.0 - self.survive[t],
            (false, false) => self.survive[t] * self.products[t][[to, from]],
        }
    }

    /// Column `from` of `Qbar_t`: the t-step marginal of a chain started at `from`.
    pub fn cumulative_col(&self, t: usize, from: usize) -> Vec<f64> {
        (0..self.states())
            .map(|i| self.cumulative_entry(t, i, from))
            .collect()
    }

    /// Row `to` of `Qbar_t`.
    pub fn cumulative_row(&self, t: usize, to: usize) -> Vec<f64> {
        (0..self.states())
            .map(|j| self.cumulative_entry(t, to, j))
            .collect()
    }

    pub fn cumulative_matrix(&self, t: usize) -> TransitionMatrix {
        let n = self.states();
        let m = Array2::from_shape_fn((n, n), |(i, j)| self.cumulative_entry(t, i, j));
        TransitionMatrix::from_array(m).expect("square")
    }
}
