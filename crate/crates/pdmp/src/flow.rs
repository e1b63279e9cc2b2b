//! Deterministic flow of the drift ODE, variational (sensitivity) matrices,
//! the survival function, and the scalar-flow machinery of the
//! non-interacting case (inversion kappa, equilibrium avoidance).
//!
//! Integration is fixed-step classical RK4 on a deterministic grid, so that
//! the survival quadrature and all finite-difference oracles are exactly
//! reproducible. Models with a per-coordinate linear drift carry a closed
//! form which bypasses RK4 unless explicitly disabled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, NonInteractingSpec};
use crate::numeric;
use crate::{Matrix, State};

/// Fixed-step integrator configuration. `step` is the RK4 step and the
/// quadrature grid spacing; `max_time` caps open-ended time integrals;
/// `trunc_eps` truncates survival-weighted integrals once the survival
/// probability drops below it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IntegratorConfig {
    pub step: f64,
    pub max_time: f64,
    pub trunc_eps: f64,
    /// Use the model's closed-form flow when available (exact flows for the
    /// neuron preset). Disable to force RK4, e.g. to measure its error.
    pub use_closed_form: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step: 1e-3,
            max_time: 1e3,
            trunc_eps: 1e-8,
            use_closed_form: true,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.max_time > 0.0) || !(self.trunc_eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step, max_time and trunc_eps must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn rk4_only(mut self) -> Self {
        self.use_closed_form = false;
        self
    }
}

/// Endpoint of a flow integration together with the integrated total rate
/// `Lambda(t) = int_0^t fbar(gamma_s(x)) ds` and an optionally sampled path.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub end_state: State,
    pub integrated_rate: f64,
    pub path: Option<Vec<(f64, State)>>,
}

fn rk4_step(f: &impl Fn(&State) -> State, x: &State, h: f64) -> State {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0)
}

fn check_finite(x: &State, context: &str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Walk the flow grid from `x0` over `[0, t_end]`, invoking `visit` at every
/// node (including `t = 0`). `visit` returns `false` to stop early. Returns
/// the state at the last visited node.
pub(crate) fn walk_flow<F: FnMut(f64, &State) -> bool>(
    model: &ModelSpec,
    x0: &State,
    t_end: f64,
    cfg: &IntegratorConfig,
    mut visit: F,
) -> Result<State> {
    let closed = if cfg.use_closed_form {
        model.linear_drift()
    } else {
        None
    };
    let mut s = 0.0;
    let mut x = x0.clone();
    if !visit(0.0, &x) || t_end == 0.0 {
        return Ok(x);
    }
    let drift = |v: &State| model.drift(v);
    while s < t_end {
        let h = cfg.step.min(t_end - s);
        s += h;
        x = match closed {
            Some(ld) => x0.map(|v| ld.flow(v, s)),
            None => rk4_step(&drift, &x, h),
        };
        check_finite(&x, "flow integration")?;
        if !visit(s, &x) {
            break;
        }
    }
    Ok(x)
}

/// Flow endpoint `gamma_t(x)`.
pub fn flow(model: &ModelSpec, x: &State, t: f64, cfg: &IntegratorConfig) -> Result<State> {
    if t < 0.0 {
        return Err(Error::Domain(format!("flow time must be >= 0, got {t}")));
    }
    if let (true, Some(ld)) = (cfg.use_closed_form, model.linear_drift()) {
        let y = x.map(|v| ld.flow(v, t));
        check_finite(&y, "closed-form flow")?;
        return Ok(y);
    }
    walk_flow(model, x, t, cfg, |_, _| true)
}

/// Flow endpoint together with the integrated total rate (trapezoid on the
/// integration grid). `record_stride` keeps every k-th node in the result.
pub fn flow_with_rate(
    model: &ModelSpec,
    x: &State,
    t: f64,
    cfg: &IntegratorConfig,
    record_stride: Option<usize>,
) -> Result<FlowResult> {
    let mut lambda = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut path = record_stride.map(|_| Vec::new());
    let mut node_idx = 0usize;
    let end_state = walk_flow(model, x, t, cfg, |s, state| {
        let fbar = model.total_rate(state);
        if let Some((sp, fp)) = prev {
            lambda += 0.5 * (fp + fbar) * (s - sp);
        }
        prev = Some((s, fbar));
        if let (Some(stride), Some(p)) = (record_stride, path.as_mut()) {
            if node_idx.is_multiple_of(stride.max(1)) {
                p.push((s, state.clone()));
            }
        }
        node_idx += 1;
        true
    })?;
    Ok(FlowResult {
        end_state,
        integrated_rate: lambda,
        path,
    })
}

/// Survival probability `e(x, t) = exp(-int_0^t fbar(gamma_s(x)) ds)`.
pub fn survival(model: &ModelSpec, x: &State, t: f64, cfg: &IntegratorConfig) -> Result<f64> {
    Ok((-flow_with_rate(model, x, t, cfg, None)?.integrated_rate).exp())
}

/// Time at which the survival drops below `cfg.trunc_eps`, capped at
/// `cfg.max_time`. Returns `(time, capped)`.
pub fn truncation_time(
    model: &ModelSpec,
    x: &State,
    cfg: &IntegratorConfig,
) -> Result<(f64, bool)> {
    let target = -cfg.trunc_eps.ln();
    let mut lambda = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let mut t_hit = cfg.max_time;
    let mut hit = false;
    walk_flow(model, x, cfg.max_time, cfg, |s, state| {
        let fbar = model.total_rate(state);
        if let Some((sp, fp)) = prev {
            lambda += 0.5 * (fp + fbar) * (s - sp);
        }
        prev = Some((s, fbar));
        if lambda >= target {
            t_hit = s;
            hit = true;
            return false;
        }
        true
    })?;
    Ok((t_hit, !hit))
}

/// Variational pair at time `t`: `Y_t(x)`, the Jacobian of the flow in its
/// initial condition, and its inverse `Z_t(x)`. `Y` solves
/// `Y' = bdot(gamma_s(x)) Y` and `Z` solves `Z' = -Z bdot(gamma_s(x))`, both
/// from the identity, integrated jointly with the flow.
pub fn variational(
    model: &ModelSpec,
    x: &State,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<(Matrix, Matrix)> {
    flow_and_variational(model, x, t, cfg).map(|(_, y, z)| (y, z))
}

/// Flow endpoint plus the variational pair, in one integration pass.
pub fn flow_and_variational(
    model: &ModelSpec,
    x: &State,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<(State, Matrix, Matrix)> {
    if t < 0.0 {
        return Err(Error::Domain(format!("flow time must be >= 0, got {t}")));
    }
    let n = model.dim();
    if let (true, Some(ld)) = (cfg.use_closed_form, model.linear_drift()) {
        let (y, z) = ld.sensitivity(t);
        let end = x.map(|v| ld.flow(v, t));
        return Ok((end, Matrix::identity(n, n) * y, Matrix::identity(n, n) * z));
    }

    // Joint RK4 on (x, Y, Z).
    let deriv = |state: &(State, Matrix, Matrix)| {
        let (xs, ys, zs) = state;
        let jac = model.drift_jacobian(xs);
        (model.drift(xs), &jac * ys, -(zs * &jac))
    };
    let mut cur = (x.clone(), Matrix::identity(n, n), Matrix::identity(n, n));
    let mut s = 0.0;
    while s < t {
        let h = cfg.step.min(t - s);
        let k1 = deriv(&cur);
        let half = (
            &cur.0 + &k1.0 * (h / 2.0),
            &cur.1 + &k1.1 * (h / 2.0),
            &cur.2 + &k1.2 * (h / 2.0),
        );
        let k2 = deriv(&half);
        let half2 = (
            &cur.0 + &k2.0 * (h / 2.0),
            &cur.1 + &k2.1 * (h / 2.0),
            &cur.2 + &k2.2 * (h / 2.0),
        );
        let k3 = deriv(&half2);
        let full = (&cur.0 + &k3.0 * h, &cur.1 + &k3.1 * h, &cur.2 + &k3.2 * h);
        let k4 = deriv(&full);
        cur = (
            &cur.0 + (k1.0 + (k2.0 + k3.0) * 2.0 + k4.0) * (h / 6.0),
            &cur.1 + (k1.1 + (k2.1 + k3.1) * 2.0 + k4.1) * (h / 6.0),
            &cur.2 + (k1.2 + (k2.2 + k3.2) * 2.0 + k4.2) * (h / 6.0),
        );
        s += h;
        check_finite(&cur.0, "variational integration (state)")?;
        if cur.1.iter().any(|v| !v.is_finite()) || cur.2.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "variational integration (Y/Z)".into(),
            });
        }
    }
    Ok(cur)
}

// ---------------------------------------------------------------------------
// Scalar flow of the non-interacting case
// ---------------------------------------------------------------------------

fn scalar_rk4_step(f: &impl Fn(f64) -> f64, v: f64, h: f64) -> f64 {
    let k1 = f(v);
    let k2 = f(v + k1 * h / 2.0);
    let k3 = f(v + k2 * h / 2.0);
    let k4 = f(v + k3 * h);
    v + (k1 + 2.0 * (k2 + k3) + k4) * h / 6.0
}

/// Marginal flow of a single particle.
pub fn scalar_flow(spec: &NonInteractingSpec, v: f64, t: f64, cfg: &IntegratorConfig) -> f64 {
    if let (true, Some(ld)) = (cfg.use_closed_form, spec.linear_drift()) {
        return ld.flow(v, t);
    }
    let f = |u: f64| spec.drift(u);
    let mut s = 0.0;
    let mut u = v;
    while s < t {
        let h = cfg.step.min(t - s);
        u = scalar_rk4_step(&f, u, h);
        s += h;
    }
    u
}

/// Scalar sensitivity pair `(y_t(v), z_t(v))` solving
/// `y' = b'(gamma_s(v)) y`, `z' = -b'(gamma_s(v)) z` from 1.
pub fn scalar_variational(
    spec: &NonInteractingSpec,
    v: f64,
    t: f64,
    cfg: &IntegratorConfig,
) -> (f64, f64) {
    if let (true, Some(ld)) = (cfg.use_closed_form, spec.linear_drift()) {
        return ld.sensitivity(t);
    }
    let deriv = |state: &(f64, f64, f64)| {
        let (u, y, z) = *state;
        let bp = spec.drift_prime(u);
        (spec.drift(u), bp * y, -bp * z)
    };
    let mut cur = (v, 1.0, 1.0);
    let mut s = 0.0;
    while s < t {
        let h = cfg.step.min(t - s);
        let k1 = deriv(&cur);
        let k2 = deriv(&(
            cur.0 + k1.0 * h / 2.0,
            cur.1 + k1.1 * h / 2.0,
            cur.2 + k1.2 * h / 2.0,
        ));
        let k3 = deriv(&(
            cur.0 + k2.0 * h / 2.0,
            cur.1 + k2.1 * h / 2.0,
            cur.2 + k2.2 * h / 2.0,
        ));
        let k4 = deriv(&(cur.0 + k3.0 * h, cur.1 + k3.1 * h, cur.2 + k3.2 * h));
        cur = (
            cur.0 + (k1.0 + 2.0 * (k2.0 + k3.0) + k4.0) * h / 6.0,
            cur.1 + (k1.1 + 2.0 * (k2.1 + k3.1) + k4.1) * h / 6.0,
            cur.2 + (k1.2 + 2.0 * (k2.2 + k3.2) + k4.2) * h / 6.0,
        );
        s += h;
    }
    (cur.1, cur.2)
}

/// Where a point sits relative to the forward orbit of the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KappaOutcome {
    /// Inside the orbit, with the inversion time.
    Reached(f64),
    /// On the side of the origin the flow never visits.
    WrongSide,
    /// At or beyond the forward limit of the flow, with that boundary value
    /// when it is known in closed form.
    AtOrBeyondLimit(Option<f64>),
}

/// Classify `y` against the forward orbit of the origin and invert the flow
/// when possible. Requires the origin off the equilibrium set.
pub fn kappa_classified(
    spec: &NonInteractingSpec,
    y: f64,
    cfg: &IntegratorConfig,
) -> Result<KappaOutcome> {
    let b0 = spec.drift(0.0);
    if b0 == 0.0 {
        return Err(Error::Domain(
            "scalar flow starts at an equilibrium; inverse undefined".into(),
        ));
    }
    if y == 0.0 {
        return Ok(KappaOutcome::Reached(0.0));
    }
    if let (true, Some(ld)) = (cfg.use_closed_form, spec.linear_drift()) {
        // gamma_t(0) = target (1 - exp(-rate t)).
        let ratio = 1.0 - y / ld.target;
        if ratio <= 0.0 {
            return Ok(KappaOutcome::AtOrBeyondLimit(Some(ld.target)));
        }
        if ratio >= 1.0 {
            return Ok(KappaOutcome::WrongSide);
        }
        return Ok(KappaOutcome::Reached(-ratio.ln() / ld.rate));
    }
    if (y > 0.0) != (b0 > 0.0) {
        return Ok(KappaOutcome::WrongSide);
    }
    match numeric::grow_and_bisect(
        |t| scalar_flow(spec, 0.0, t, cfg) - y,
        0.0,
        1.0,
        cfg.max_time,
        1e-12,
    ) {
        Ok(t) => Ok(KappaOutcome::Reached(t)),
        Err(_) => Ok(KappaOutcome::AtOrBeyondLimit(None)),
    }
}

/// Inverse of the scalar flow started at zero: the time `kappa(y)` with
/// `gamma_kappa(0) = y`. Points on the wrong side of the origin or at/past
/// the forward limit are a domain error.
pub fn kappa(spec: &NonInteractingSpec, y: f64, cfg: &IntegratorConfig) -> Result<f64> {
    match kappa_classified(spec, y, cfg)? {
        KappaOutcome::Reached(t) => Ok(t),
        KappaOutcome::WrongSide => Err(Error::Domain(format!(
            "{y} is not reachable from 0 (wrong side of the origin)"
        ))),
        KappaOutcome::AtOrBeyondLimit(limit) => Err(Error::Domain(match limit {
            Some(l) => format!("{y} is at or beyond the forward flow limit {l}"),
            None => format!(
                "{y} not reached by the flow from 0 before max_time = {}",
                cfg.max_time
            ),
        })),
    }
}

/// Inverse of `v -> gamma_t(v)` at fixed `t` (the scalar flow is strictly
/// increasing in its initial condition).
pub fn scalar_flow_inverse(
    spec: &NonInteractingSpec,
    t: f64,
    y: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    if let (true, Some(ld)) = (cfg.use_closed_form, spec.linear_drift()) {
        return Ok(ld.target + (y - ld.target) * (ld.rate * t).exp());
    }
    let g = |v: f64| scalar_flow(spec, v, t, cfg) - y;
    let mut lo = y.min(0.0) - 1.0;
    let mut hi = y.max(0.0) + 1.0;
    for _ in 0..200 {
        if g(lo) <= 0.0 && g(hi) >= 0.0 {
            return numeric::bisect(g, lo, hi, 1e-12);
        }
        let width = hi - lo;
        lo -= width;
        hi += width;
        if width > 1e12 {
            break;
        }
    }
    Err(Error::Domain(format!(
        "could not bracket the flow preimage of {y} at t = {t}"
    )))
}

/// Minimal `|b(gamma_u(v))|` over the grid on `[0, T]`. Strictly positive
/// whenever `b(v) != 0` (flows started off the equilibrium set never reach
/// it in finite time).
pub fn equilibrium_avoidance(
    spec: &NonInteractingSpec,
    v: f64,
    t_max: f64,
    cfg: &IntegratorConfig,
) -> f64 {
    assert!(t_max > 0.0);
    if let (true, Some(ld)) = (cfg.use_closed_form, spec.linear_drift()) {
        // |b| decays monotonically; propagate the distance to the target
        // analytically (evaluating b at the state cancels once the flow is
        // within an ulp of the target).
        return ld.drift_along_flow(v, t_max).abs();
    }
    let mut min_abs = spec.drift(v).abs();
    let mut s = 0.0;
    let mut u = v;
    let f = |w: f64| spec.drift(w);
    while s < t_max {
        let h = cfg.step.min(t_max - s);
        s += h;
        u = scalar_rk4_step(&f, u, h);
        min_abs = min_abs.min(spec.drift(u).abs());
    }
    min_abs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_neuron_model, build_ring_model, NeuronParams, RateSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn neuron(n: usize, lambda: f64, v_star: f64) -> (ModelSpec, NonInteractingSpec) {
        let params = NeuronParams::uniform(n, lambda, v_star, 0.2, RateSpec::constant(1.0));
        (
            build_neuron_model(&params).unwrap(),
            params.non_interacting_spec().unwrap(),
        )
    }

    #[test]
    fn flow_identity_at_time_zero() {
        let (model, _) = neuron(2, 1.0, 1.0);
        let x = State::from_column_slice(&[0.4, -0.2]);
        let cfg = IntegratorConfig::default();
        assert_eq!(flow(&model, &x, 0.0, &cfg).unwrap(), x);
        assert_eq!(flow(&model, &x, 0.0, &cfg.rk4_only()).unwrap(), x);
    }

    #[test]
    fn neuron_flow_closed_form_value() {
        // lambda = 1, v* = 1, v = 0, t = ln 2 => 1/2.
        let (model, _) = neuron(1, 1.0, 1.0);
        let x = State::zeros(1);
        let cfg = IntegratorConfig::default();
        let y = flow(&model, &x, 2.0f64.ln(), &cfg).unwrap();
        assert!((y[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rk4_matches_closed_form_on_neuron() {
        let (model, _) = neuron(3, 1.3, 0.8);
        let cfg = IntegratorConfig::default();
        let rk4 = cfg.rk4_only();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = State::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            let t = rng.random_range(0.0..5.0);
            let exact = flow(&model, &x, t, &cfg).unwrap();
            let approx = flow(&model, &x, t, &rk4).unwrap();
            assert!((exact - approx).abs().max() < 1e-8);
        }
    }

    #[test]
    fn semigroup_property_on_nonlinear_model() {
        let model = build_ring_model(3).unwrap();
        let cfg = IntegratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let x = State::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let t = rng.random_range(0.0..2.0);
            let s = rng.random_range(0.0..2.0);
            let direct = flow(&model, &x, t + s, &cfg).unwrap();
            let mid = flow(&model, &x, t, &cfg).unwrap();
            let composed = flow(&model, &mid, s, &cfg).unwrap();
            assert!((direct - composed).abs().max() < 1e-7);
        }
    }

    #[test]
    fn variational_identity_at_zero_and_neuron_closed_form() {
        let (model, _) = neuron(2, 0.7, 1.0);
        let cfg = IntegratorConfig::default();
        let x = State::from_column_slice(&[0.3, 0.9]);
        let (y0, z0) = variational(&model, &x, 0.0, &cfg).unwrap();
        assert_eq!(y0, Matrix::identity(2, 2));
        assert_eq!(z0, Matrix::identity(2, 2));

        let t = 1.7;
        let (y, _) = variational(&model, &x, t, &cfg.rk4_only()).unwrap();
        let expect = Matrix::identity(2, 2) * (-0.7f64 * t).exp();
        assert!((y - expect).abs().max() < 1e-9);
    }

    #[test]
    fn variational_pair_is_inverse() {
        let model = build_ring_model(3).unwrap();
        let cfg = IntegratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = State::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let t = rng.random_range(0.0..5.0);
            let (y, z) = variational(&model, &x, t, &cfg).unwrap();
            let prod = &y * &z;
            assert!((prod - Matrix::identity(3, 3)).abs().max() < 1e-6);
        }
    }

    #[test]
    fn variational_y_matches_fd_jacobian_of_flow() {
        let model = build_ring_model(2).unwrap();
        let cfg = IntegratorConfig::default();
        let x = State::from_column_slice(&[0.5, -0.3]);
        let t = 1.2;
        let (y, _) = variational(&model, &x, t, &cfg).unwrap();
        let fd = crate::model::fd_jacobian_abs(|v| flow(&model, v, t, &cfg).unwrap(), &x, 1e-5);
        assert!((y - fd).abs().max() < 1e-6);
    }

    #[test]
    fn survival_basics() {
        let (model, _) = neuron(3, 1.0, 1.0);
        let cfg = IntegratorConfig::default();
        let x = State::zeros(3);
        assert_eq!(survival(&model, &x, 0.0, &cfg).unwrap(), 1.0);

        // Constant rates c = 1, N = 3: e(x, t) = exp(-3t), trapezoid exact.
        let t = 0.8;
        let s = survival(&model, &x, t, &cfg).unwrap();
        assert!((s - (-3.0 * t).exp()).abs() < 1e-12);

        // Nonincreasing in t.
        let mut prev = 1.0;
        for k in 1..=20 {
            let s = survival(&model, &x, k as f64 * 0.1, &cfg).unwrap();
            assert!(s <= prev + 1e-15);
            prev = s;
        }
    }

    #[test]
    fn survival_affine_rates_match_analytic_integral() {
        // Affine (unclipped in range) rates along the exact neuron flow admit
        // a closed-form integrated rate.
        let lambda = 1.0;
        let v_star = 1.0;
        let offset = 1.0;
        let slope = 0.25;
        let params = NeuronParams::uniform(
            2,
            lambda,
            v_star,
            0.1,
            RateSpec {
                kind: crate::model::RateKind::AffineClipped { offset, slope },
                bound: 10.0,
                floor: 0.0,
            },
        );
        let model = build_neuron_model(&params).unwrap();
        let cfg = IntegratorConfig::default();
        let x = State::from_column_slice(&[0.2, 0.6]);
        let t = 2.5;
        let n = 2.0;
        let sum_x = x.sum();
        let lam_t = n * (offset + slope * v_star) * t
            + slope * (sum_x - n * v_star) * (1.0 - (-lambda * t).exp()) / lambda;
        let numeric = -survival(&model, &x, t, &cfg).unwrap().ln();
        assert!(
            ((numeric - lam_t) / lam_t).abs() < 1e-6,
            "quadrature {numeric} vs analytic {lam_t}"
        );
    }

    #[test]
    fn flow_result_integrated_rate_and_path() {
        let (model, _) = neuron(2, 1.0, 1.0);
        let cfg = IntegratorConfig::default();
        let x = State::zeros(2);
        // Lambda grows monotonically from zero along the grid.
        let mut prev = -1.0;
        for k in 0..=10 {
            let t = k as f64 * 0.3;
            let res = flow_with_rate(&model, &x, t, &cfg, None).unwrap();
            assert!(res.integrated_rate >= prev);
            prev = res.integrated_rate;
            if k == 0 {
                assert_eq!(res.integrated_rate, 0.0);
            }
        }
        // Recorded path covers [0, t] at the requested stride.
        let res = flow_with_rate(&model, &x, 1.0, &cfg, Some(100)).unwrap();
        let path = res.path.unwrap();
        assert!(path.len() >= 10);
        assert_eq!(path[0].0, 0.0);
        for w in path.windows(2) {
            assert!(w[1].0 > w[0].0);
        }
        let (t_last, ref s_last) = path[path.len() - 1];
        let direct = flow(&model, &x, t_last, &cfg).unwrap();
        assert!((s_last - direct).abs().max() < 1e-12);
    }

    #[test]
    fn truncation_time_caps_and_flags() {
        let (model, _) = neuron(2, 1.0, 1.0);
        let cfg = IntegratorConfig::default();
        let x = State::zeros(2);
        // fbar = 2, target -ln(1e-8)/2 ~ 9.2.
        let (t, capped) = truncation_time(&model, &x, &cfg).unwrap();
        assert!(!capped);
        assert!((t - (-cfg.trunc_eps.ln()) / 2.0).abs() < 0.01);

        let tight = IntegratorConfig {
            max_time: 1.0,
            ..cfg
        };
        let (t, capped) = truncation_time(&model, &x, &tight).unwrap();
        assert!(capped);
        assert!((t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_closed_form_and_roundtrip() {
        let (_, spec) = neuron(2, 1.0, 1.0);
        let cfg = IntegratorConfig::default();
        assert_eq!(kappa(&spec, 0.0, &cfg).unwrap(), 0.0);
        // v* = 1: kappa(y) = log(1 / (1 - y)); y = 0.5 -> ln 2.
        let k = kappa(&spec, 0.5, &cfg).unwrap();
        assert!((k - 2.0f64.ln()).abs() < 1e-12);
        for i in 1..100 {
            let y = 0.99 * i as f64 / 100.0;
            let t = kappa(&spec, y, &cfg).unwrap();
            let back = scalar_flow(&spec, 0.0, t, &cfg);
            assert!((back - y).abs() < 1e-10, "roundtrip failed at y = {y}");
            assert!((t - (1.0f64 / (1.0 - y)).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_bisection_agrees_with_closed_form() {
        // Same drift registered without the closed form: exercises the
        // bracket-growth + bisection path.
        let spec = NonInteractingSpec::new(
            1,
            Arc::new(|v: f64| -(v - 1.0)),
            Arc::new(|_| -1.0),
            Arc::new(|_, _, _| 0.0),
            Arc::new(|_, _, _| 0.0),
            1.0,
            0.0,
            vec![Arc::new(|_| 1.0)],
            1.0,
            1.0,
            1.0,
        )
        .unwrap();
        let cfg = IntegratorConfig::default();
        for y in [0.1, 0.5, 0.9] {
            let t = kappa(&spec, y, &cfg).unwrap();
            assert!((t - (1.0f64 / (1.0 - y)).ln()).abs() < 1e-8);
        }
    }

    #[test]
    fn kappa_rejects_unreachable_points() {
        let (_, spec) = neuron(1, 1.0, 1.0);
        let cfg = IntegratorConfig::default();
        assert!(kappa(&spec, -0.5, &cfg).is_err());
        assert!(kappa(&spec, 1.0, &cfg).is_err());
        assert!(kappa(&spec, 1.5, &cfg).is_err());
    }

    #[test]
    fn scalar_flow_inverse_roundtrip() {
        let (_, spec) = neuron(1, 0.8, 1.2);
        let cfg = IntegratorConfig::default();
        for v in [-1.0, 0.0, 0.7, 2.0] {
            for t in [0.1, 1.0, 3.0] {
                let y = scalar_flow(&spec, v, t, &cfg);
                let back = scalar_flow_inverse(&spec, t, y, &cfg).unwrap();
                assert!((back - v).abs() < 1e-10);
                let back_rk4 = scalar_flow_inverse(&spec, t, y, &cfg.rk4_only()).unwrap();
                assert!((back_rk4 - v).abs() < 1e-8);
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn prop_kappa_inverts_the_flow(
            lambda in 0.2f64..3.0,
            v_star in 0.2f64..3.0,
            frac in 0.01f64..0.99,
        ) {
            let params = NeuronParams::uniform(1, lambda, v_star, 0.0, RateSpec::constant(1.0));
            let spec = params.non_interacting_spec().unwrap();
            let cfg = IntegratorConfig::default();
            let y = frac * v_star;
            for c in [&cfg, &cfg.rk4_only()] {
                let t = kappa(&spec, y, c).unwrap();
                let back = scalar_flow(&spec, 0.0, t, c);
                proptest::prop_assert!((back - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn equilibrium_avoidance_closed_forms() {
        let lambda = 0.9;
        let v_star = 1.1;
        let (_, spec) = neuron(1, lambda, v_star);
        let cfg = IntegratorConfig::default();

        // From 0: |b(gamma_t(0))| = lambda v* exp(-lambda t).
        let m = equilibrium_avoidance(&spec, 0.0, 50.0, &cfg);
        assert!(((m - lambda * v_star * (-50.0 * lambda).exp()) / m).abs() < 1e-9);
        assert!(m > 0.0);

        // At the equilibrium the flow is constant.
        assert_eq!(equilibrium_avoidance(&spec, v_star, 10.0, &cfg), 0.0);

        // From 2 v*: |gamma_t - v*| = v* exp(-lambda t).
        let t_max = 7.0;
        let m = equilibrium_avoidance(&spec, 2.0 * v_star, t_max, &cfg);
        let expect = lambda * v_star * (-lambda * t_max).exp();
        assert!(((m - expect) / expect).abs() < 1e-9);
    }
}
