//! Jump-time skeletons and their sensitivity to the jump times.
//!
//! A skeleton imposes a fixed sequence of jumping particles and inter-jump
//! waiting times on the deterministic dynamics. The derivation matrix is the
//! Jacobian of the skeleton endpoint with respect to the waiting times; when
//! its columns span the state space ("good" sequences), the randomness of
//! the jump times alone creates full-dimensional noise around the endpoint.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig};
use crate::model::ModelSpec;
use crate::{Matrix, State};

/// A prescribed jump sequence: `n+1` waiting times and `n+1` particle
/// indices (0-based). The first index is the particle jumping at time zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSchedule {
    times: Vec<f64>,
    indices: Vec<usize>,
}

impl JumpSchedule {
    pub fn new(times: Vec<f64>, indices: Vec<usize>) -> Result<Self> {
        if times.is_empty() || times.len() != indices.len() {
            return Err(Error::InvalidConfig(format!(
                "schedule needs equally many times and indices (>= 1), got {} and {}",
                times.len(),
                indices.len()
            )));
        }
        if times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::InvalidConfig("schedule times must be >= 0".into()));
        }
        Ok(JumpSchedule { times, indices })
    }

    /// Number of jumps after the initial one (`n`); the schedule holds
    /// `n + 1` times and indices.
    pub fn n(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Cumulative jump epochs `s_k = t_1 + ... + t_k`, `k = 1..n+1`.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut s = 0.0;
        self.times
            .iter()
            .map(|t| {
                s += t;
                s
            })
            .collect()
    }

    fn validate_for(&self, model: &ModelSpec) -> Result<()> {
        for &i in &self.indices {
            if i >= model.dim() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    dim: model.dim(),
                });
            }
        }
        Ok(())
    }
}

/// States along a skeleton: post-jump states `x_0..x_n`, pre-jump states
/// `y_1..y_n` and the endpoint after the final waiting time.
#[derive(Debug, Clone)]
pub struct SkeletonTrace {
    pub start: State,
    pub post_jump: Vec<State>,
    pub pre_jump: Vec<State>,
    pub endpoint: State,
}

/// Run the schedule from `y`: jump, flow, jump, ..., flow.
pub fn skeleton(
    model: &ModelSpec,
    y: &State,
    sched: &JumpSchedule,
    cfg: &IntegratorConfig,
) -> Result<SkeletonTrace> {
    sched.validate_for(model)?;
    let n = sched.n();
    let mut post_jump = Vec::with_capacity(n + 1);
    let mut pre_jump = Vec::with_capacity(n);

    let mut x = model.jump(sched.indices[0], y)?;
    post_jump.push(x.clone());
    for k in 1..=n {
        let y_k = flow::flow(model, &x, sched.times[k - 1], cfg)?;
        x = model.jump(sched.indices[k], &y_k)?;
        pre_jump.push(y_k);
        post_jump.push(x.clone());
    }
    let endpoint = flow::flow(model, &x, sched.times[n], cfg)?;
    Ok(SkeletonTrace {
        start: y.clone(),
        post_jump,
        pre_jump,
        endpoint,
    })
}

/// The `N x (n+1)` Jacobian of the skeleton endpoint in the waiting times,
/// with its singular values (descending).
#[derive(Debug, Clone)]
pub struct DerivationMatrix {
    pub sigma: Matrix,
    singular_values: Vec<f64>,
}

impl DerivationMatrix {
    fn from_sigma(sigma: Matrix) -> Self {
        let mut sv: Vec<f64> = sigma.clone().singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        DerivationMatrix {
            sigma,
            singular_values: sv,
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.sigma.ncols()
    }

    /// Columns in the reversed indexing of the spanning criterion: the first
    /// field is the drift at the endpoint (last column of sigma), the last
    /// one carries the full chain of jump Jacobians.
    pub fn vector_fields(&self) -> Vec<State> {
        (0..self.sigma.ncols())
            .rev()
            .map(|j| self.sigma.column(j).into_owned())
            .collect()
    }

    pub fn gram(&self) -> Matrix {
        &self.sigma * self.sigma.transpose()
    }

    pub fn det_gram(&self) -> f64 {
        self.gram().determinant()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn max_singular_value(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// Smallest of the `min(N, n+1)` singular values. Full rank `N` requires
    /// both `n+1 >= N` and this value positive.
    pub fn min_singular_value(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }

    pub fn spans_state_space(&self, threshold: f64) -> bool {
        self.n_columns() >= self.dim() && self.min_singular_value() > threshold
    }
}

struct ChainData {
    /// Flow sensitivities `Y_{t_k}(x_{k-1})`, k = 1..n+1.
    y_mats: Vec<Matrix>,
    /// Jump Jacobians `A^{i_k}(y_k)`, k = 1..n.
    a_mats: Vec<Matrix>,
    /// Drift at the pre-jump states, k = 1..n.
    b_pre: Vec<State>,
    /// Drift at the endpoint.
    b_end: State,
}

fn chain_data(
    model: &ModelSpec,
    y: &State,
    sched: &JumpSchedule,
    cfg: &IntegratorConfig,
) -> Result<ChainData> {
    sched.validate_for(model)?;
    let n = sched.n();
    let mut y_mats = Vec::with_capacity(n + 1);
    let mut a_mats = Vec::with_capacity(n);
    let mut b_pre = Vec::with_capacity(n);

    let mut x = model.jump(sched.indices[0], y)?;
    for k in 1..=n {
        let (y_k, y_mat, _) = flow::flow_and_variational(model, &x, sched.times[k - 1], cfg)?;
        a_mats.push(model.jump_jacobian(sched.indices[k], &y_k)?);
        b_pre.push(model.drift(&y_k));
        x = model.jump(sched.indices[k], &y_k)?;
        y_mats.push(y_mat);
    }
    let (endpoint, y_last, _) = flow::flow_and_variational(model, &x, sched.times[n], cfg)?;
    y_mats.push(y_last);
    let b_end = model.drift(&endpoint);
    Ok(ChainData {
        y_mats,
        a_mats,
        b_pre,
        b_end,
    })
}

/// Derivation matrix by the backward prefix sweep: shared left prefixes
/// `Y_{t_{n+1}} A^{i_n} ... ` are extended once per column, `O(n N^3)`
/// total.
pub fn derivation_matrix(
    model: &ModelSpec,
    y: &State,
    sched: &JumpSchedule,
    cfg: &IntegratorConfig,
) -> Result<DerivationMatrix> {
    let data = chain_data(model, y, sched, cfg)?;
    let n = sched.n();
    let dim = model.dim();
    let mut sigma = Matrix::zeros(dim, n + 1);
    sigma.set_column(n, &data.b_end);

    let mut prefix = data.y_mats[n].clone();
    for k in (1..=n).rev() {
        let col = &prefix * &data.a_mats[k - 1] * &data.b_pre[k - 1];
        sigma.set_column(k - 1, &col);
        if k > 1 {
            prefix = &prefix * &data.a_mats[k - 1] * &data.y_mats[k - 1];
        }
    }
    Ok(DerivationMatrix::from_sigma(sigma))
}

/// Same matrix, accumulated column-by-column right-to-left as matrix-vector
/// products (no prefix sharing). Kept as the independent route for checking
/// the product association order.
pub fn derivation_matrix_columnwise(
    model: &ModelSpec,
    y: &State,
    sched: &JumpSchedule,
    cfg: &IntegratorConfig,
) -> Result<DerivationMatrix> {
    let data = chain_data(model, y, sched, cfg)?;
    let n = sched.n();
    let dim = model.dim();
    let mut sigma = Matrix::zeros(dim, n + 1);
    sigma.set_column(n, &data.b_end);
    for k in 1..=n {
        let mut v = &data.a_mats[k - 1] * &data.b_pre[k - 1];
        for m in k + 1..=n {
            v = &data.y_mats[m - 1] * v;
            v = &data.a_mats[m - 1] * v;
        }
        v = &data.y_mats[n] * v;
        sigma.set_column(k - 1, &v);
    }
    Ok(DerivationMatrix::from_sigma(sigma))
}

/// Finite-difference Jacobian of the skeleton endpoint in each waiting time
/// (central differences of step `fd_step`, one-sided at `t_k = 0`).
pub fn endpoint_jacobian_fd(
    model: &ModelSpec,
    y: &State,
    sched: &JumpSchedule,
    cfg: &IntegratorConfig,
    fd_step: f64,
) -> Result<Matrix> {
    let eval = |times: Vec<f64>| -> Result<State> {
        let s = JumpSchedule::new(times, sched.indices().to_vec())?;
        Ok(skeleton(model, y, &s, cfg)?.endpoint)
    };
    let dim = model.dim();
    let cols = sched.times().len();
    let mut jac = Matrix::zeros(dim, cols);
    for k in 0..cols {
        let mut plus = sched.times().to_vec();
        plus[k] += fd_step;
        let eta_plus = eval(plus)?;
        let column = if sched.times()[k] >= fd_step {
            let mut minus = sched.times().to_vec();
            minus[k] -= fd_step;
            (eta_plus - eval(minus)?) / (2.0 * fd_step)
        } else {
            let eta0 = eval(sched.times().to_vec())?;
            (eta_plus - eta0) / fd_step
        };
        jac.set_column(k, &column);
    }
    Ok(jac)
}

/// Spanning fields of the zero-waiting-time skeleton: pure jump compositions
/// with the flow sensitivities collapsed to the identity. If these span the
/// state space, the schedule is good for all small enough waiting times.
pub fn zero_time_fields(model: &ModelSpec, y: &State, indices: &[usize]) -> Result<Vec<State>> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("empty index sequence".into()));
    }
    for &i in indices {
        if i >= model.dim() {
            return Err(Error::IndexOutOfRange {
                index: i,
                dim: model.dim(),
            });
        }
    }
    let n = indices.len() - 1;
    let mut states = Vec::with_capacity(n + 1);
    let mut x = model.jump(indices[0], y)?;
    states.push(x.clone());
    for &i in &indices[1..] {
        x = model.jump(i, &x)?;
        states.push(x.clone());
    }

    let mut fields = Vec::with_capacity(n + 1);
    fields.push(model.drift(&states[n]));
    let mut prefix = Matrix::identity(model.dim(), model.dim());
    for m in (1..=n).rev() {
        prefix = &prefix * &model.jump_jacobian(indices[m], &states[m - 1])?;
        fields.push(&prefix * model.drift(&states[m - 1]));
    }
    Ok(fields)
}

/// Goodness verdict for one `(start, schedule)` pair.
#[derive(Debug, Clone, Serialize)]
pub struct Goodness {
    pub good: bool,
    pub min_singular_value: f64,
    pub det_gram: f64,
    pub threshold: f64,
}

/// Decide goodness by the smallest singular value of the derivation matrix.
/// `threshold` defaults to `1e-8 * |sigma|_2`; the determinant of the Gram
/// matrix underflows for larger dimensions, so the verdict never uses it.
pub fn is_good(
    model: &ModelSpec,
    y: &State,
    sched: &JumpSchedule,
    threshold: Option<f64>,
    cfg: &IntegratorConfig,
) -> Result<Goodness> {
    let dm = derivation_matrix(model, y, sched, cfg)?;
    let threshold = threshold.unwrap_or(1e-8 * dm.max_singular_value());
    Ok(Goodness {
        good: dm.spans_state_space(threshold),
        min_singular_value: dm.min_singular_value(),
        det_gram: dm.det_gram(),
        threshold,
    })
}

/// One row of a goodness sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub start: Vec<f64>,
    pub min_singular_value: f64,
    pub det_gram: f64,
}

/// Sampled certificate of the "for all starting points" goodness claim:
/// starts are drawn from a box (plus its corners in small dimensions), the
/// worst smallest singular value is reported. A certificate of
/// non-refutation over the sampled set, not a proof.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    pub draws: usize,
    pub threshold: f64,
    pub worst_start: Vec<f64>,
    pub worst_min_singular_value: f64,
    pub all_good: bool,
    pub rows: Vec<SweepRow>,
}

#[allow(clippy::too_many_arguments)]
pub fn goodness_sweep(
    model: &ModelSpec,
    sched: &JumpSchedule,
    box_min: f64,
    box_max: f64,
    draws: usize,
    seed: u64,
    threshold: Option<f64>,
    cfg: &IntegratorConfig,
) -> Result<SweepReport> {
    if !(box_max > box_min) {
        return Err(Error::InvalidConfig(format!(
            "empty sweep box [{box_min}, {box_max}]"
        )));
    }
    let dim = model.dim();
    let mut starts: Vec<State> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        starts.push(State::from_fn(dim, |_, _| {
            rng.random_range(box_min..box_max)
        }));
    }
    if dim <= 10 {
        for mask in 0..(1usize << dim) {
            starts.push(State::from_fn(dim, |i, _| {
                if mask >> i & 1 == 1 {
                    box_max
                } else {
                    box_min
                }
            }));
        }
    }

    let mut rows = Vec::with_capacity(starts.len());
    let mut worst: Option<(usize, f64)> = None;
    let mut all_good = true;
    let mut used_threshold = threshold.unwrap_or(0.0);
    for (idx, y) in starts.iter().enumerate() {
        let verdict = is_good(model, y, sched, threshold, cfg)?;
        if threshold.is_none() {
            used_threshold = used_threshold.max(verdict.threshold);
        }
        all_good &= verdict.good;
        if worst.is_none_or(|(_, sv)| verdict.min_singular_value < sv) {
            worst = Some((idx, verdict.min_singular_value));
        }
        rows.push(SweepRow {
            start: y.iter().copied().collect(),
            min_singular_value: verdict.min_singular_value,
            det_gram: verdict.det_gram,
        });
    }
    let (widx, wsv) = worst.expect("at least one start");
    Ok(SweepReport {
        indices: sched.indices().to_vec(),
        times: sched.times().to_vec(),
        draws: starts.len(),
        threshold: used_threshold,
        worst_start: starts[widx].iter().copied().collect(),
        worst_min_singular_value: wsv,
        all_good,
        rows,
    })
}

/// Closed-form determinant of the neuron derivation matrix for the schedule
/// in which the particles jump once each, in order:
/// `lambda^N v*^N prod_k exp(-lambda (s_N - s_{k-1}))` with `s_0 = 0`.
pub fn neuron_det_sigma_closed_form(lambda: f64, v_star: f64, times: &[f64]) -> f64 {
    let n = times.len();
    let s_total: f64 = times.iter().sum();
    let mut s_prev = 0.0;
    let mut det = (lambda * v_star).powi(n as i32);
    for &t in &times[..n] {
        det *= (-lambda * (s_total - s_prev)).exp();
        s_prev += t;
    }
    det
}
