//! Exact trajectory simulation by thinning, path records, jump-chain
//! extraction, ergodic averages and generator-based stationarity residuals.
//!
//! Candidate jump times arrive at the constant majorant rate
//! `N * rate_bound`; each candidate is accepted with probability
//! `fbar / (N * rate_bound)` evaluated on the flow, then the jumping particle
//! is chosen proportionally to its rate. Given the declared rate bound this
//! reproduces the jump mechanism exactly; the integrated-rate inversion
//! sampler is kept alongside as a cross-check oracle.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig};
use crate::model::{ModelSpec, ScalarField, VectorField};
use crate::State;

/// Seed plus stream id; one stream per path. Identical specs reproduce
/// bit-identical paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSpec {
    pub seed: u64,
    pub stream: u64,
}

impl RngSpec {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngSpec { seed, stream }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// One simulated trajectory. Jump times are absolute and strictly
/// increasing; `pre_jump_states[k]` is the state just before the k-th jump
/// (the jump chain) and `post_jump_states[k]` the state right after.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    pub initial_state: State,
    pub jump_times: Vec<f64>,
    pub jump_indices: Vec<usize>,
    pub pre_jump_states: Vec<State>,
    pub post_jump_states: Vec<State>,
    pub final_time: f64,
    pub final_state: State,
    pub rng: RngSpec,
}

impl PathRecord {
    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    pub fn inter_jump_times(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.jump_times.len());
        let mut prev = 0.0;
        for &t in &self.jump_times {
            out.push(t - prev);
            prev = t;
        }
        out
    }

    /// Flow segments as `(start_state, start_time, duration)`, covering
    /// `[0, final_time]`.
    pub fn segments(&self) -> Vec<(State, f64, f64)> {
        let mut out = Vec::with_capacity(self.n_jumps() + 1);
        let mut t = 0.0;
        let mut x = self.initial_state.clone();
        for k in 0..self.n_jumps() {
            out.push((x.clone(), t, self.jump_times[k] - t));
            t = self.jump_times[k];
            x = self.post_jump_states[k].clone();
        }
        if self.final_time > t {
            out.push((x, t, self.final_time - t));
        }
        out
    }
}

/// First accepted jump: waiting time, jumping particle, and the state at the
/// jump time (just before the jump is applied).
#[derive(Debug, Clone)]
pub struct NextJump {
    pub time: f64,
    pub index: usize,
    pub pre_state: State,
}

/// Incremental flow evaluation along one inter-jump segment: candidate times
/// arrive sorted, so the segment is integrated once, with a partial RK4 step
/// at each requested time.
struct FlowAdvancer<'a> {
    model: &'a ModelSpec,
    cfg: &'a IntegratorConfig,
    origin: State,
    state: State,
    time: f64,
}

impl<'a> FlowAdvancer<'a> {
    fn new(model: &'a ModelSpec, x: &State, cfg: &'a IntegratorConfig) -> Self {
        FlowAdvancer {
            model,
            cfg,
            origin: x.clone(),
            state: x.clone(),
            time: 0.0,
        }
    }

    fn advance_to(&mut self, t: f64) -> Result<&State> {
        debug_assert!(t >= self.time);
        if let (true, Some(ld)) = (self.cfg.use_closed_form, self.model.linear_drift()) {
            self.state = self.origin.map(|v| ld.flow(v, t));
            self.time = t;
        } else {
            let drift = |v: &State| self.model.drift(v);
            while self.time < t {
                let h = self.cfg.step.min(t - self.time);
                let k1 = drift(&self.state);
                let k2 = drift(&(&self.state + &k1 * (h / 2.0)));
                let k3 = drift(&(&self.state + &k2 * (h / 2.0)));
                let k4 = drift(&(&self.state + &k3 * h));
                self.state += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
                self.time += h;
            }
        }
        if self.state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "flow during thinning".into(),
            });
        }
        Ok(&self.state)
    }
}

/// Thinning, capped at `cap`: returns `None` if the first accepted candidate
/// would exceed the cap.
fn next_jump_capped(
    model: &ModelSpec,
    x: &State,
    rng: &mut ChaCha8Rng,
    cfg: &IntegratorConfig,
    cap: f64,
) -> Result<Option<NextJump>> {
    let majorant = model.dim() as f64 * model.rate_bound();
    let exp = Exp::new(majorant).expect("positive majorant rate");
    let mut advancer = FlowAdvancer::new(model, x, cfg);
    let mut s = 0.0;
    loop {
        s += exp.sample(rng);
        if s > cap {
            return Ok(None);
        }
        let state = advancer.advance_to(s)?;
        let fbar = model.checked_total_rate(state)?;
        let u: f64 = rng.random();
        if u * majorant < fbar {
            let mut target = rng.random::<f64>() * fbar;
            let mut index = model.dim() - 1;
            for i in 0..model.dim() {
                target -= model.rate(i, state);
                if target < 0.0 {
                    index = i;
                    break;
                }
            }
            return Ok(Some(NextJump {
                time: s,
                index,
                pre_state: state.clone(),
            }));
        }
    }
}

/// Waiting time, index and pre-jump state of the next jump from `x`.
/// Errors with [`Error::Timeout`] if nothing is accepted before
/// `cfg.max_time`.
pub fn next_jump(
    model: &ModelSpec,
    x: &State,
    rng: &mut ChaCha8Rng,
    cfg: &IntegratorConfig,
) -> Result<NextJump> {
    next_jump_capped(model, x, rng, cfg, cfg.max_time)?.ok_or(Error::Timeout {
        max_time: cfg.max_time,
    })
}

/// Cross-check sampler: inverts the integrated rate, solving
/// `Lambda(t) = -ln U` on the quadrature grid (linear interpolation within
/// the final step), then picks the index proportionally to the rates.
pub fn next_jump_by_inversion(
    model: &ModelSpec,
    x: &State,
    rng: &mut ChaCha8Rng,
    cfg: &IntegratorConfig,
) -> Result<NextJump> {
    let u: f64 = rng.random();
    let target = -(1.0 - u).ln();
    let mut lambda = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut hit: Option<f64> = None;
    flow::walk_flow(model, x, cfg.max_time, cfg, |s, state| {
        let fbar = model.total_rate(state);
        if let Some((sp, fp)) = prev {
            let inc = 0.5 * (fp + fbar) * (s - sp);
            if lambda + inc >= target {
                let frac = if inc > 0.0 {
                    (target - lambda) / inc
                } else {
                    1.0
                };
                hit = Some(sp + frac * (s - sp));
                return false;
            }
            lambda += inc;
        }
        prev = Some((s, fbar));
        true
    })?;
    let t = hit.ok_or(Error::Timeout {
        max_time: cfg.max_time,
    })?;
    let pre_state = flow::flow(model, x, t, cfg)?;
    let fbar = model.checked_total_rate(&pre_state)?;
    let mut target = rng.random::<f64>() * fbar;
    let mut index = model.dim() - 1;
    for i in 0..model.dim() {
        target -= model.rate(i, &pre_state);
        if target < 0.0 {
            index = i;
            break;
        }
    }
    Ok(NextJump {
        time: t,
        index,
        pre_state,
    })
}

/// Stopping rule: horizon, jump budget, or both (first one reached wins;
/// with an exhausted jump budget the flow still runs to the horizon).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StopRule {
    pub horizon: Option<f64>,
    pub max_jumps: Option<usize>,
}

impl StopRule {
    pub fn horizon(t: f64) -> Self {
        StopRule {
            horizon: Some(t),
            max_jumps: None,
        }
    }

    pub fn jumps(k: usize) -> Self {
        StopRule {
            horizon: None,
            max_jumps: Some(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon.is_none() && self.max_jumps.is_none() {
            return Err(Error::InvalidConfig(
                "stop rule needs a horizon or a jump budget".into(),
            ));
        }
        if let Some(t) = self.horizon {
            if !(t >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "horizon must be >= 0, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Simulate one trajectory. Deterministic given `rng_spec`.
pub fn simulate_path(
    model: &ModelSpec,
    x0: &State,
    stop: StopRule,
    rng_spec: RngSpec,
    cfg: &IntegratorConfig,
) -> Result<PathRecord> {
    stop.validate()?;
    cfg.validate()?;
    let mut rng = rng_spec.rng();
    let mut t_abs = 0.0;
    let mut x = x0.clone();

    let mut jump_times = Vec::new();
    let mut jump_indices = Vec::new();
    let mut pre_jump_states = Vec::new();
    let mut post_jump_states = Vec::new();

    loop {
        if let Some(k) = stop.max_jumps {
            if jump_times.len() >= k {
                break;
            }
        }
        let remaining = stop.horizon.map(|t| t - t_abs);
        if let Some(r) = remaining {
            if r <= 0.0 {
                break;
            }
        }
        let cap = remaining.unwrap_or(f64::INFINITY).min(cfg.max_time);
        match next_jump_capped(model, &x, &mut rng, cfg, cap)? {
            Some(nj) => {
                t_abs += nj.time;
                let post = model.jump(nj.index, &nj.pre_state)?;
                jump_times.push(t_abs);
                jump_indices.push(nj.index);
                pre_jump_states.push(nj.pre_state);
                post_jump_states.push(post.clone());
                x = post;
            }
            None => {
                if remaining.is_some_and(|r| r <= cfg.max_time) {
                    break;
                }
                return Err(Error::Timeout {
                    max_time: cfg.max_time,
                });
            }
        }
    }

    let (final_time, final_state) = match stop.horizon {
        Some(t) if t > t_abs => (t, flow::flow(model, &x, t - t_abs, cfg)?),
        _ => (t_abs, x),
    };

    Ok(PathRecord {
        initial_state: x0.clone(),
        jump_times,
        jump_indices,
        pre_jump_states,
        post_jump_states,
        final_time,
        final_state,
        rng: rng_spec,
    })
}

// ---------------------------------------------------------------------------
// Test functions and the generator
// ---------------------------------------------------------------------------

/// Scalar observable with an optional analytic gradient (finite differences
/// otherwise).
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    f: ScalarField,
    grad: Option<VectorField>,
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: ScalarField) -> Self {
        TestFunction {
            name: name.into(),
            f,
            grad: None,
        }
    }

    pub fn with_gradient(mut self, grad: VectorField) -> Self {
        self.grad = Some(grad);
        self
    }

    pub fn eval(&self, x: &State) -> f64 {
        (self.f)(x)
    }

    pub fn gradient(&self, x: &State) -> State {
        if let Some(g) = &self.grad {
            return g(x);
        }
        let n = x.len();
        let mut out = State::zeros(n);
        let mut xp = x.clone();
        for l in 0..n {
            let h = 1e-6 * x[l].abs().max(1.0);
            xp[l] = x[l] + h;
            let fp = (self.f)(&xp);
            xp[l] = x[l] - h;
            let fm = (self.f)(&xp);
            xp[l] = x[l];
            out[l] = (fp - fm) / (2.0 * h);
        }
        out
    }
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

/// The fixed observable suite used by the verification reports:
/// `1`, `x1`, `sin(x1)`, `exp(-|x|^2)` and a smoothly clipped `x1 x2`
/// (dropped in dimension one).
pub fn test_suite(dim: usize) -> Vec<TestFunction> {
    let mut suite = vec![
        TestFunction::new("one", Arc::new(|_: &State| 1.0) as ScalarField)
            .with_gradient(Arc::new(|x: &State| State::zeros(x.len()))),
        TestFunction::new("x1", Arc::new(|x: &State| x[0]) as ScalarField).with_gradient(Arc::new(
            |x: &State| {
                let mut g = State::zeros(x.len());
                g[0] = 1.0;
                g
            },
        )),
        TestFunction::new("sin_x1", Arc::new(|x: &State| x[0].sin()) as ScalarField).with_gradient(
            Arc::new(|x: &State| {
                let mut g = State::zeros(x.len());
                g[0] = x[0].cos();
                g
            }),
        ),
        TestFunction::new(
            "gauss",
            Arc::new(|x: &State| (-x.norm_squared()).exp()) as ScalarField,
        )
        .with_gradient(Arc::new(|x: &State| {
            let e = (-x.norm_squared()).exp();
            x * (-2.0 * e)
        })),
    ];
    if dim >= 2 {
        // 5 tanh(x1 x2 / 5): bounded, smooth version of the clipped product.
        let c = 5.0;
        suite.push(
            TestFunction::new(
                "x1x2_clipped",
                Arc::new(move |x: &State| c * (x[0] * x[1] / c).tanh()) as ScalarField,
            )
            .with_gradient(Arc::new(move |x: &State| {
                let sech2 = 1.0 - (x[0] * x[1] / c).tanh().powi(2);
                let mut g = State::zeros(x.len());
                g[0] = x[1] * sech2;
                g[1] = x[0] * sech2;
                g
            })),
        );
    }
    suite
}

/// Generator applied to an observable:
/// `Lg(x) = sum_i f_i(x) [g(Delta_i(x)) - g(x)] + <grad g(x), b(x)>`.
pub fn apply_generator(model: &ModelSpec, g: &TestFunction, x: &State) -> f64 {
    let gx = g.eval(x);
    let mut jump_part = 0.0;
    for i in 0..model.dim() {
        let post = (model.jump(i, x)).expect("index in range");
        jump_part += model.rate(i, x) * (g.eval(&post) - gx);
    }
    jump_part + g.gradient(x).dot(&model.drift(x))
}

// ---------------------------------------------------------------------------
// Time and jump-chain averages
// ---------------------------------------------------------------------------

/// Configuration of the path averages: quadrature spacing along the flow,
/// batch count for the batch-means SE, and the burn-in fraction (of jumps)
/// discarded at the start.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AverageConfig {
    pub quad_step: f64,
    pub batches: usize,
    pub burn_in_fraction: f64,
}

impl Default for AverageConfig {
    fn default() -> Self {
        AverageConfig {
            quad_step: 0.01,
            batches: 30,
            burn_in_fraction: 0.1,
        }
    }
}

/// Per-batch accumulation of `int g(X_s) ds` over equal time windows after
/// burn-in. Returns `(batch integrals, batch durations)`.
fn batched_time_integrals(
    model: &ModelSpec,
    path: &PathRecord,
    g: &dyn Fn(&State) -> f64,
    cfg: &IntegratorConfig,
    avg: &AverageConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k0 = ((path.n_jumps() as f64) * avg.burn_in_fraction).ceil() as usize;
    let t0 = if k0 == 0 || path.n_jumps() == 0 {
        0.0
    } else {
        path.jump_times[k0.min(path.n_jumps()) - 1]
    };
    let total = path.final_time - t0;
    if !(total > 0.0) {
        return Err(Error::InsufficientData(
            "empty averaging window (zero duration after burn-in)".into(),
        ));
    }
    let b = avg.batches.max(1);
    let width = total / b as f64;
    let mut sums = vec![0.0; b];
    let durations = vec![width; b];

    // Exact closed-form flows tolerate a coarse quadrature grid; RK4 flows
    // accumulate on the integration grid itself.
    let quad_cfg = if cfg.use_closed_form && model.linear_drift().is_some() {
        IntegratorConfig {
            step: cfg.step.max(avg.quad_step),
            ..*cfg
        }
    } else {
        *cfg
    };

    for (x_seg, seg_start, duration) in path.segments() {
        let seg_end = seg_start + duration;
        if seg_end <= t0 || duration <= 0.0 {
            continue;
        }
        let mut prev: Option<(f64, f64)> = None;
        flow::walk_flow(model, &x_seg, duration, &quad_cfg, |s, state| {
            let abs = seg_start + s;
            let value = g(state);
            if let Some((pa, pv)) = prev {
                if abs > t0 {
                    let lo = pa.max(t0);
                    let inc = 0.5 * (pv + value) * (abs - lo);
                    let mid = 0.5 * (lo + abs);
                    let bin = (((mid - t0) / width) as usize).min(b - 1);
                    sums[bin] += inc;
                }
            }
            prev = Some((abs, value));
            true
        })?;
    }
    Ok((sums, durations))
}

/// Time average `(1/T) int_0^T g(X_s) ds` over the post-burn-in window, with
/// a batch-means standard error.
pub fn ergodic_average(
    model: &ModelSpec,
    path: &PathRecord,
    g: &dyn Fn(&State) -> f64,
    cfg: &IntegratorConfig,
    avg: &AverageConfig,
) -> Result<(f64, f64)> {
    let (sums, durations) = batched_time_integrals(model, path, g, cfg, avg)?;
    Ok(crate::stats::batch_ratio(&sums, &durations))
}

/// Mean of `g` over the jump chain `Z_k`, `k > burn_in`, with a batch-means
/// standard error.
pub fn jump_chain_average(
    path: &PathRecord,
    g: &dyn Fn(&State) -> f64,
    burn_in: usize,
) -> Result<(f64, f64)> {
    if path.n_jumps() <= burn_in {
        return Err(Error::InsufficientData(format!(
            "path has {} jumps, burn-in is {burn_in}",
            path.n_jumps()
        )));
    }
    let values: Vec<f64> = path.pre_jump_states[burn_in..].iter().map(g).collect();
    Ok(crate::stats::batch_means(&values, 30))
}

/// Result of checking one distributional identity: both sides plus the
/// batch-wise residual mean and SE.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub residual_se: f64,
}

impl IdentityCheck {
    pub fn holds(&self, sigmas: f64) -> bool {
        self.residual.abs() <= sigmas * self.residual_se
    }
}

/// Jump-chain identity: the jump-chain mean of `g` against the
/// rate-weighted time average `m(fbar g) / m(fbar)`. Residuals are computed
/// per time batch so the SE reflects the correlation structure.
pub fn jump_chain_identity(
    model: &ModelSpec,
    path: &PathRecord,
    g: &TestFunction,
    cfg: &IntegratorConfig,
    avg: &AverageConfig,
) -> Result<IdentityCheck> {
    let weighted = |x: &State| model.total_rate(x) * g.eval(x);
    let fbar = |x: &State| model.total_rate(x);
    let (num_sums, durations) = batched_time_integrals(model, path, &weighted, cfg, avg)?;
    let (den_sums, _) = batched_time_integrals(model, path, &fbar, cfg, avg)?;

    let k0 = ((path.n_jumps() as f64) * avg.burn_in_fraction).ceil() as usize;
    if path.n_jumps() <= k0 {
        return Err(Error::InsufficientData("no jumps after burn-in".into()));
    }
    let t0 = if k0 == 0 {
        0.0
    } else {
        path.jump_times[k0 - 1]
    };
    let b = durations.len();
    let width = (path.final_time - t0) / b as f64;
    let mut jump_sums = vec![0.0; b];
    let mut jump_counts = vec![0usize; b];
    for k in k0..path.n_jumps() {
        let t = path.jump_times[k];
        if t <= t0 {
            continue;
        }
        let bin = (((t - t0) / width) as usize).min(b - 1);
        jump_sums[bin] += g.eval(&path.pre_jump_states[k]);
        jump_counts[bin] += 1;
    }

    let total_jumps: usize = jump_counts.iter().sum();
    let lhs = jump_sums.iter().sum::<f64>() / total_jumps as f64;
    let rhs = num_sums.iter().sum::<f64>() / den_sums.iter().sum::<f64>();

    let mut residuals = Vec::with_capacity(b);
    for k in 0..b {
        if jump_counts[k] == 0 || den_sums[k] <= 0.0 {
            continue;
        }
        residuals.push(jump_sums[k] / jump_counts[k] as f64 - num_sums[k] / den_sums[k]);
    }
    if residuals.len() < 3 {
        return Err(Error::InsufficientData(
            "too few non-empty batches for the jump-chain identity".into(),
        ));
    }
    let (residual, residual_se) = crate::stats::batch_means(&residuals, residuals.len());
    Ok(IdentityCheck {
        lhs,
        rhs,
        residual,
        residual_se,
    })
}

/// Stationarity residual `m(Lg)` (zero in the invariant regime) as an
/// ergodic average with batch-means SE.
pub fn stationarity_residual(
    model: &ModelSpec,
    path: &PathRecord,
    g: &TestFunction,
    cfg: &IntegratorConfig,
    avg: &AverageConfig,
) -> Result<(f64, f64)> {
    ergodic_average(model, path, &|x| apply_generator(model, g, x), cfg, avg)
}
