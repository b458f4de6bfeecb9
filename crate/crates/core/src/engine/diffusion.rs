use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{CategoricalDist, EngineError, PosKind, TokenSeq};
use crate::kernels::{Chain, ChainId, Schedule};

/// Probability floor applied before taking logarithms in the KL.
pub const KL_FLOOR: f64 = 1e-12;

fn check_step(t: usize, schedule: &Schedule) -> Result<(), EngineError> {
    if t > schedule.steps() {
        return Err(EngineError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    Ok(())
}

fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Draws one `x_t ~ Cat(Qbar_t e_{x0})` on `chain`.
pub fn chain_forward_sample<R: Rng + ?Sized>(chain: &Chain, x0: usize, t: usize, rng: &mut R) -> usize {
    if t == 0 {
        return x0;
    }
    let u: f64 = rng.random();
    if u < chain.absorbed_mass(t) {
        chain.absorbing()
    } else {
        sample_index(rng, chain.product(t).column(x0).iter().copied())
    }
}

/// Draws `x_t ~ Cat(Qbar_t x_0)` independently per unclamped position;
/// `t = 0` returns the input.
pub fn forward_sample<R: Rng + ?Sized>(
    x0: &TokenSeq,
    t: usize,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<TokenSeq, EngineError> {
    check_step(t, schedule)?;
    x0.check(schedule)?;
    let mut out = x0.clone();
    if t == 0 {
        return Ok(out);
    }
    for (i, (state, kind)) in out.states.iter_mut().zip(&x0.kinds).enumerate() {
        let Some(id) = kind.chain() else { continue };
        let chain = schedule.chain(id);
        if *state == chain.absorbing() {
            return Err(EngineError::AbsorbingInData { position: i });
        }
        *state = chain_forward_sample(chain, *state, t, rng);
    }
    Ok(out)
}

/// `q(x_{t-1} | x_t, x_0)` over the chain's states: proportional to
/// `Q_t[x_t, .] * Qbar_{t-1}[., x_0]`; the point mass on `x_0` at `t = 1`.
pub fn posterior(
    x_t: usize,
    x0: usize,
    t: usize,
    chain: ChainId,
    schedule: &Schedule,
) -> Result<Vec<f64>, EngineError> {
    check_step(t, schedule)?;
    chain_posterior(schedule.chain(chain), x_t, x0, t)
}

/// [`posterior`] on an arbitrary chain.
pub fn chain_posterior(c: &Chain, x_t: usize, x0: usize, t: usize) -> Result<Vec<f64>, EngineError> {
    if t == 0 || t > c.steps() {
        return Err(EngineError::StepOutOfRange { t, steps: c.steps() });
    }
    if x_t >= c.states() || x0 >= c.valid_states() {
        return Err(EngineError::Shape(format!(
            "state ({x_t}, {x0}) outside the chain"
        )));
    }
    if t == 1 {
        if c.step_entry(1, x_t, x0) <= 0.0 {
            return Err(EngineError::ZeroMass { x_t, x0, t });
        }
        let mut v = vec![0.0; c.states()];
        v[x0] = 1.0;
        return Ok(v);
    }
    let mut v: Vec<f64> = (0..c.states())
        .map(|j| c.step_entry(t, x_t, j) * c.cumulative_entry(t - 1, j, x0))
        .collect();
    let z: f64 = v.iter().sum();
    if z.is_nan() || z <= 0.0 {
        return Err(EngineError::ZeroMass { x_t, x0, t });
    }
    v.iter_mut().for_each(|p| *p /= z);
    Ok(v)
}

/// Per-position quantities shared by the reverse step and the loss, for a
/// group of positions on one chain at one step.
struct Terms {
    /// `Q_t[x_t, j]`, `n x (K+1)`.
    r: Array2<f64>,
    /// `Qbar_t[x_t, k]` over valid `k`, `n x K`.
    z: Array2<f64>,
}

fn terms(chain: &Chain, t: usize, xt: &[usize]) -> Terms {
    let k = chain.valid_states();
    let n = xt.len();
    let mut r = Array2::zeros((n, k + 1));
    let mut z = Array2::zeros((n, k));
    let surv = chain.survival(t);
    let prod = chain.product(t);
    for (i, &x) in xt.iter().enumerate() {
        for j in 0..=k {
            r[[i, j]] = chain.step_entry(t, x, j);
        }
        if x == chain.absorbing() {
            z.row_mut(i).fill(1.0 - surv);
        } else {
            z.row_mut(i).assign(&prod.row(x).mapv(|v| surv * v));
        }
    }
    Terms { r, z }
}

/// Predicted `x_0` candidates consistent with `x_t`.
fn possible(z: f64) -> bool {
    z > f64::MIN_POSITIVE
}

/// Softmax over the candidates of each row; impossible entries get 0.
fn restricted_softmax(logits: ArrayView2<f64>, z: &Array2<f64>) -> Result<Array2<f64>, EngineError> {
    let mut w = Array2::zeros(logits.raw_dim());
    for ((mut wr, lr), zr) in w.rows_mut().into_iter().zip(logits.rows()).zip(z.rows()) {
        let m = lr
            .iter()
            .zip(zr)
            .filter(|(_, &z)| possible(z))
            .fold(f64::NEG_INFINITY, |a, (&l, _)| a.max(l));
        if !m.is_finite() {
            return Err(EngineError::NonFinite("logits".into()));
        }
        let mut s = 0.0;
        for ((wv, &l), &zv) in wr.iter_mut().zip(lr).zip(zr) {
            if possible(zv) {
                *wv = (l - m).exp();
                s += *wv;
            }
        }
        wr.mapv_inplace(|v| v / s);
    }
    Ok(w)
}

/// `p(x_{t-1}) = sum_k q(x_{t-1} | x_t, k) u_k Z_k` for rows of `u`, where
/// `u_k = w_k / Z_k`.
fn mix(chain: &Chain, t: usize, r: &Array2<f64>, u: &Array2<f64>) -> Array2<f64> {
    let k = chain.valid_states();
    let prev = chain.product(t - 1);
    let c_prev = chain.survival(t - 1);
    let m = u.dot(&prev.t());
    let tot = u.sum_axis(Axis(1));
    let mut p = Array2::zeros(r.raw_dim());
    for i in 0..r.nrows() {
        for j in 0..k {
            p[[i, j]] = r[[i, j]] * c_prev * m[[i, j]];
        }
        p[[i, k]] = r[[i, k]] * (1.0 - c_prev) * tot[i];
    }
    p
}

fn weights_over_z(w: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
    let mut u = w.clone();
    ndarray::Zip::from(&mut u).and(z).for_each(|u, &z| {
        *u = if possible(z) { *u / z } else { 0.0 };
    });
    u
}

/// Reverse distributions for positions of one chain: row `i` is
/// `sum_k w_ik q(. | x_t[i], k)` with `w_i` the softmax of `logits` row `i`
/// over the clean tokens that could have produced `x_t[i]`.
pub fn chain_reverse_dist(
    chain: &Chain,
    t: usize,
    x_t: &[usize],
    logits: ArrayView2<f64>,
) -> Result<Array2<f64>, EngineError> {
    if t == 0 || t > chain.steps() {
        return Err(EngineError::StepOutOfRange {
            t,
            steps: chain.steps(),
        });
    }
    if logits.nrows() != x_t.len() || logits.ncols() != chain.valid_states() {
        return Err(EngineError::Shape("logits do not match the chain".into()));
    }
    let tm = terms(chain, t, x_t);
    let w = restricted_softmax(logits, &tm.z)?;
    let u = weights_over_z(&w, &tm.z);
    let mut p = mix(chain, t, &tm.r, &u);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(p)
}

/// Groups unclamped positions by chain, in position order.
fn groups(x: &TokenSeq) -> Vec<(ChainId, Vec<usize>)> {
    let mut out: Vec<(ChainId, Vec<usize>)> = Vec::new();
    for (i, k) in x.kinds.iter().enumerate() {
        if let Some(id) = k.chain() {
            match out.iter_mut().find(|(c, _)| *c == id) {
                Some((_, v)) => v.push(i),
                None => out.push((id, vec![i])),
            }
        }
    }
    out
}

fn rows(a: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(0), idx)
}

fn check_logits(x: &TokenSeq, logits: ArrayView2<f64>, schedule: &Schedule) -> Result<(), EngineError> {
    if logits.nrows() != x.len() {
        return Err(EngineError::Shape(format!(
            "{} logit rows for {} positions",
            logits.nrows(),
            x.len()
        )));
    }
    for (id, _) in groups(x) {
        let k = schedule.chain(id).valid_states();
        if logits.ncols() != k {
            return Err(EngineError::Shape(format!(
                "{} logit columns for a chain with {k} valid states",
                logits.ncols()
            )));
        }
    }
    Ok(())
}

/// Distribution of `x_{t-1}` under the x0-parameterized reverse process:
/// the posterior mixed over predicted clean tokens, with the prediction
/// renormalized over tokens that could have produced `x_t`. Clamped
/// positions get empty rows.
pub fn reverse_dist(
    x_t: &TokenSeq,
    x0_logits: ArrayView2<f64>,
    t: usize,
    schedule: &Schedule,
) -> Result<CategoricalDist, EngineError> {
    if t == 0 {
        return Err(EngineError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    check_step(t, schedule)?;
    x_t.check(schedule)?;
    check_logits(x_t, x0_logits, schedule)?;
    let mut probs = vec![Vec::new(); x_t.len()];
    for (id, idx) in groups(x_t) {
        let chain = schedule.chain(id);
        let xt: Vec<usize> = idx.iter().map(|&i| x_t.states[i]).collect();
        let p = chain_reverse_dist(chain, t, &xt, rows(x0_logits, &idx).view())?;
        for (row, &i) in p.rows().into_iter().zip(&idx) {
            probs[i] = row.to_vec();
        }
    }
    Ok(CategoricalDist { probs })
}

/// Samples `x_{t-1}` from [`reverse_dist`]; clamped positions are copied.
pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &TokenSeq,
    x0_logits: ArrayView2<f64>,
    t: usize,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<TokenSeq, EngineError> {
    let dist = reverse_dist(x_t, x0_logits, t, schedule)?;
    let mut out = x_t.clone();
    for (i, row) in dist.probs.iter().enumerate() {
        if x_t.kinds[i] != PosKind::Clamped {
            out.states[i] = sample_index(rng, row.iter().copied());
        }
    }
    Ok(out)
}

/// Summed per-position loss and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    /// Sum of the KL terms over unclamped positions.
    pub kl_sum: f64,
    /// Sum of the auxiliary cross-entropy terms (unweighted).
    pub ce_sum: f64,
    pub positions: usize,
    /// Gradient of `kl_sum + aux_weight * ce_sum`; zero rows at clamped positions.
    pub dlogits: Array2<f64>,
}

/// Per-position KL and cross-entropy terms on one chain, with the gradient
/// of `sum(kl) + aux_weight * sum(ce)` with respect to the logits.
#[derive(Debug, Clone)]
pub struct ChainLoss {
    pub kl: Vec<f64>,
    pub ce: Vec<f64>,
    pub dlogits: Array2<f64>,
}

/// KL between `q(x_{t-1} | x_t, x_0)` and the predicted reverse distribution
/// for positions of one chain.
pub fn chain_kl_grad(
    chain: &Chain,
    t: usize,
    x0: &[usize],
    x_t: &[usize],
    logits: ArrayView2<f64>,
    aux_weight: f64,
) -> Result<ChainLoss, EngineError> {
    if t == 0 || t > chain.steps() {
        return Err(EngineError::StepOutOfRange {
            t,
            steps: chain.steps(),
        });
    }
    let kv = chain.valid_states();
    if x0.len() != x_t.len() || logits.nrows() != x_t.len() || logits.ncols() != kv {
        return Err(EngineError::Shape("logits do not match the chain".into()));
    }
    let tm = terms(chain, t, x_t);
    let w = restricted_softmax(logits, &tm.z)?;
    let u = weights_over_z(&w, &tm.z);
    let p = mix(chain, t, &tm.r, &u);
    // true posterior: the same mixture with a one-hot prediction
    let mut u0 = Array2::zeros(u.raw_dim());
    for (row, &x) in x0.iter().enumerate() {
        if x >= kv {
            return Err(EngineError::AbsorbingInData { position: row });
        }
        let zx = tm.z[[row, x]];
        if !possible(zx) {
            return Err(EngineError::ZeroMass {
                x_t: x_t[row],
                x0: x,
                t,
            });
        }
        u0[[row, x]] = 1.0 / zx;
    }
    let q = mix(chain, t, &tm.r, &u0);
    // g_j = -R_j q_j / p_j, the adjoint of p through the KL
    let mut kl = vec![0.0; x_t.len()];
    let mut gp = Array2::zeros(p.raw_dim());
    for i in 0..p.nrows() {
        let qs: f64 = q.row(i).sum();
        let ps: f64 = p.row(i).sum();
        for j in 0..=kv {
            let qj = q[[i, j]] / qs;
            if qj > 0.0 {
                let pj = p[[i, j]] / ps;
                kl[i] += qj * (qj.max(KL_FLOOR).ln() - pj.max(KL_FLOOR).ln());
                if pj >= KL_FLOOR {
                    gp[[i, j]] = -tm.r[[i, j]] * qj / p[[i, j]];
                }
            }
        }
    }
    let c_prev = chain.survival(t - 1);
    let prev = chain.product(t - 1);
    let gv = gp.slice(ndarray::s![.., ..kv]).dot(&prev);
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut ce = vec![0.0; x_t.len()];
    for (row, &x) in x0.iter().enumerate() {
        // dKL/dw_k = (c_prev (G P)_k + (1 - c_prev) G_abs) / Z_k
        let mut gw = Array1::zeros(kv);
        for k in 0..kv {
            let zk = tm.z[[row, k]];
            if possible(zk) {
                gw[k] = (c_prev * gv[[row, k]] + (1.0 - c_prev) * gp[[row, kv]]) / zk;
            }
        }
        let wr = w.row(row);
        let mean = wr.dot(&gw);
        for k in 0..kv {
            let mut d = wr[k] * (gw[k] - mean);
            if aux_weight != 0.0 {
                d += aux_weight * (wr[k] - if k == x { 1.0 } else { 0.0 });
            }
            dlogits[[row, k]] = d;
        }
        ce[row] = -wr[x].max(KL_FLOOR).ln();
    }
    Ok(ChainLoss { kl, ce, dlogits })
}

/// KL between the true posterior and the predicted reverse distribution,
/// summed over unclamped positions, with gradient. `aux_weight` adds the
/// cross-entropy of the truncated x0 prediction against the clean token.
pub fn kl_loss_grad(
    x0: &TokenSeq,
    t: usize,
    x_t: &TokenSeq,
    x0_logits: ArrayView2<f64>,
    schedule: &Schedule,
    aux_weight: f64,
) -> Result<LossGrad, EngineError> {
    if t == 0 {
        return Err(EngineError::StepOutOfRange {
            t,
            steps: schedule.steps(),
        });
    }
    check_step(t, schedule)?;
    if x0.kinds != x_t.kinds {
        return Err(EngineError::Shape("x0 and x_t layouts differ".into()));
    }
    x_t.check(schedule)?;
    x0.check(schedule)?;
    check_logits(x_t, x0_logits, schedule)?;
    let mut dlogits = Array2::zeros(x0_logits.raw_dim());
    let mut kl_sum = 0.0;
    let mut ce_sum = 0.0;
    let mut positions = 0;
    for (id, idx) in groups(x_t) {
        let chain = schedule.chain(id);
        let xt: Vec<usize> = idx.iter().map(|&i| x_t.states[i]).collect();
        let x0s: Vec<usize> = idx.iter().map(|&i| x0.states[i]).collect();
        let cl = chain_kl_grad(chain, t, &x0s, &xt, rows(x0_logits, &idx).view(), aux_weight)
            .map_err(|e| match e {
                EngineError::AbsorbingInData { position } => {
                    EngineError::AbsorbingInData { position: idx[position] }
                }
                e => e,
            })?;
        for (row, &i) in idx.iter().enumerate() {
            dlogits.row_mut(i).assign(&cl.dlogits.row(row));
        }
        kl_sum += cl.kl.iter().sum::<f64>();
        ce_sum += cl.ce.iter().sum::<f64>();
        positions += idx.len();
    }
    Ok(LossGrad {
        kl_sum,
        ce_sum,
        positions,
        dlogits,
    })
}

/// Mean KL over unclamped positions.
pub fn kl_loss(
    x0: &TokenSeq,
    t: usize,
    x_t: &TokenSeq,
    x0_logits: ArrayView2<f64>,
    schedule: &Schedule,
) -> Result<f64, EngineError> {
    let lg = kl_loss_grad(x0, t, x_t, x0_logits, schedule, 0.0)?;
    Ok(if lg.positions == 0 {
        0.0
    } else {
        lg.kl_sum / lg.positions as f64
    })
}
