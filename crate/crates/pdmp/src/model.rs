//! PDMP model descriptions.
//!
//! A model is a drift field `b`, per-particle jump maps `Δ_i` with Jacobians
//! `A^i`, and jump rate functions `f_i` with a declared uniform bound. In the
//! house-of-cards case a jump of particle `i` resets coordinate `i` to zero
//! and shifts every other coordinate.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Matrix, State};

pub type VectorField = Arc<dyn Fn(&State) -> State + Send + Sync>;
pub type MatrixField = Arc<dyn Fn(&State) -> Matrix + Send + Sync>;
pub type ScalarField = Arc<dyn Fn(&State) -> f64 + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type PairFn = Arc<dyn Fn(usize, usize, f64) -> f64 + Send + Sync>;

/// Closed-form exponential relaxation `v' = -rate (v - target)`, available
/// when the drift is linear per coordinate. Lets the flow module bypass RK4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDrift {
    pub rate: f64,
    pub target: f64,
}

impl LinearDrift {
    /// Flow of the scalar relaxation after time `t`.
    pub fn flow(&self, v: f64, t: f64) -> f64 {
        if t == 0.0 {
            return v;
        }
        let decay = (-self.rate * t).exp();
        self.target + (v - self.target) * decay
    }

    /// `b(flow(v, t)) = -rate (v - target) exp(-rate t)`, with the difference
    /// propagated analytically: evaluating the drift at the state cancels
    /// catastrophically once the flow is within an ulp of the target.
    pub fn drift_along_flow(&self, v: f64, t: f64) -> f64 {
        -self.rate * (v - self.target) * (-self.rate * t).exp()
    }

    /// Scalar sensitivity `d flow / d v` and its inverse at time `t`.
    pub fn sensitivity(&self, t: f64) -> (f64, f64) {
        let y = (-self.rate * t).exp();
        (y, 1.0 / y)
    }
}

/// Full PDMP description. Immutable after construction; all evaluations are
/// pure, so a `ModelSpec` can be shared freely across threads.
#[derive(Clone)]
pub struct ModelSpec {
    dim: usize,
    drift: VectorField,
    drift_jacobian: Option<MatrixField>,
    jump_maps: Vec<VectorField>,
    jump_jacobians: Vec<MatrixField>,
    rates: Vec<ScalarField>,
    rate_bound: f64,
    house_of_cards: bool,
    non_interacting: bool,
    linear_drift: Option<LinearDrift>,
}

impl ModelSpec {
    /// Assemble a model from its raw fields. `jump_maps`, `jump_jacobians`
    /// and `rates` must each have one entry per particle; `rate_bound` is the
    /// caller-declared uniform bound on every rate (required by the thinning
    /// sampler, which cannot infer it).
    pub fn new(
        dim: usize,
        drift: VectorField,
        jump_maps: Vec<VectorField>,
        jump_jacobians: Vec<MatrixField>,
        rates: Vec<ScalarField>,
        rate_bound: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if jump_maps.len() != dim || jump_jacobians.len() != dim || rates.len() != dim {
            return Err(Error::InvalidModel(format!(
                "expected {dim} jump maps / jacobians / rates, got {}/{}/{}",
                jump_maps.len(),
                jump_jacobians.len(),
                rates.len()
            )));
        }
        if !(rate_bound > 0.0 && rate_bound.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "rate_bound must be a positive finite number, got {rate_bound}"
            )));
        }
        Ok(Self {
            dim,
            drift,
            drift_jacobian: None,
            jump_maps,
            jump_jacobians,
            rates,
            rate_bound,
            house_of_cards: false,
            non_interacting: false,
            linear_drift: None,
        })
    }

    pub fn with_drift_jacobian(mut self, jac: MatrixField) -> Self {
        self.drift_jacobian = Some(jac);
        self
    }

    pub fn with_flags(mut self, house_of_cards: bool, non_interacting: bool) -> Self {
        self.house_of_cards = house_of_cards;
        self.non_interacting = non_interacting;
        self
    }

    pub fn with_linear_drift(mut self, ld: LinearDrift) -> Self {
        self.linear_drift = Some(ld);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn house_of_cards(&self) -> bool {
        self.house_of_cards
    }

    pub fn non_interacting(&self) -> bool {
        self.non_interacting
    }

    pub fn linear_drift(&self) -> Option<LinearDrift> {
        self.linear_drift
    }

    pub fn drift(&self, x: &State) -> State {
        (self.drift)(x)
    }

    /// Jacobian of the drift; falls back to central finite differences with
    /// per-coordinate step `1e-6 * max(1, |x_l|)` when no closed form was
    /// supplied.
    pub fn drift_jacobian(&self, x: &State) -> Matrix {
        match &self.drift_jacobian {
            Some(jac) => jac(x),
            None => fd_jacobian_scaled(|v| (self.drift)(v), x, 1e-6),
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.dim {
            return Err(Error::IndexOutOfRange {
                index: i,
                dim: self.dim,
            });
        }
        Ok(())
    }

    /// Post-jump configuration `Δ_i(x)`.
    pub fn jump(&self, i: usize, x: &State) -> Result<State> {
        self.check_index(i)?;
        Ok((self.jump_maps[i])(x))
    }

    /// Jacobian `A^i(x)` of the jump map.
    pub fn jump_jacobian(&self, i: usize, x: &State) -> Result<Matrix> {
        self.check_index(i)?;
        Ok((self.jump_jacobians[i])(x))
    }

    /// Rate `f_i(x)` without bound checking.
    pub fn rate(&self, i: usize, x: &State) -> f64 {
        (self.rates[i])(x)
    }

    /// Rate `f_i(x)`, rejecting values outside `[0, rate_bound]`. The
    /// declared bound is a hard contract: violating models error out instead
    /// of being clipped.
    pub fn checked_rate(&self, i: usize, x: &State) -> Result<f64> {
        let value = (self.rates[i])(x);
        if !value.is_finite() || value < 0.0 || value > self.rate_bound * (1.0 + 1e-12) {
            return Err(Error::RateBound {
                index: i,
                value,
                bound: self.rate_bound,
            });
        }
        Ok(value)
    }

    /// Total jump rate `f̄(x) = Σ_i f_i(x)`.
    pub fn total_rate(&self, x: &State) -> f64 {
        (0..self.dim).map(|i| self.rate(i, x)).sum()
    }

    /// Total rate with the per-coordinate bound check applied.
    pub fn checked_total_rate(&self, x: &State) -> Result<f64> {
        let mut sum = 0.0;
        for i in 0..self.dim {
            sum += self.checked_rate(i, x)?;
        }
        Ok(sum)
    }
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim)
            .field("rate_bound", &self.rate_bound)
            .field("house_of_cards", &self.house_of_cards)
            .field("non_interacting", &self.non_interacting)
            .field("linear_drift", &self.linear_drift)
            .finish_non_exhaustive()
    }
}

/// Central finite-difference Jacobian with absolute step `h` per coordinate.
pub fn fd_jacobian_abs(f: impl Fn(&State) -> State, x: &State, h: f64) -> Matrix {
    fd_jacobian_impl(f, x, |_| h)
}

/// Central finite-difference Jacobian with per-coordinate step
/// `rel * max(1, |x_l|)`.
pub fn fd_jacobian_scaled(f: impl Fn(&State) -> State, x: &State, rel: f64) -> Matrix {
    fd_jacobian_impl(f, x, |xl| rel * xl.abs().max(1.0))
}

fn fd_jacobian_impl(f: impl Fn(&State) -> State, x: &State, step: impl Fn(f64) -> f64) -> Matrix {
    let n = x.len();
    let probe = f(x);
    let m = probe.len();
    let mut jac = Matrix::zeros(m, n);
    let mut xp = x.clone();
    for l in 0..n {
        let h = step(x[l]);
        xp[l] = x[l] + h;
        let fp = f(&xp);
        xp[l] = x[l] - h;
        let fm = f(&xp);
        xp[l] = x[l];
        for k in 0..m {
            jac[(k, l)] = (fp[k] - fm[k]) / (2.0 * h);
        }
    }
    jac
}

/// Scalar central finite difference of order one.
pub fn fd_scalar_derivative(f: impl Fn(f64) -> f64, v: f64, h: f64) -> f64 {
    (f(v + h) - f(v - h)) / (2.0 * h)
}

// ---------------------------------------------------------------------------
// Rate families (used by the JSON model schema and the neuron preset)
// ---------------------------------------------------------------------------

/// Scalar jump-rate family `v -> f(v)` with declared bound and floor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RateSpec {
    #[serde(flatten)]
    pub kind: RateKind,
    /// Declared uniform upper bound on the rate.
    pub bound: f64,
    /// Declared infimum of the rate (0 allowed; regularity guarantees are
    /// then reported as absent).
    pub floor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateKind {
    /// `f(v) = value`.
    Constant { value: f64 },
    /// Logistic ramp `f(v) = floor + (bound - floor) / (1 + exp(-slope (v - center)))`.
    Sigmoid { center: f64, slope: f64 },
    /// `f(v) = clamp(offset + slope v, floor, bound)`.
    AffineClipped { offset: f64, slope: f64 },
}

impl RateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "rate bound must be positive and finite, got {}",
                self.bound
            )));
        }
        if !(self.floor >= 0.0) || self.floor > self.bound {
            return Err(Error::InvalidModel(format!(
                "rate floor must satisfy 0 <= floor <= bound, got {}",
                self.floor
            )));
        }
        if let RateKind::Constant { value } = self.kind {
            if value < 0.0 || value > self.bound {
                return Err(Error::InvalidModel(format!(
                    "constant rate {value} outside [0, bound]"
                )));
            }
        }
        Ok(())
    }

    pub fn eval(&self, v: f64) -> f64 {
        match self.kind {
            RateKind::Constant { value } => value,
            RateKind::Sigmoid { center, slope } => {
                let s = 1.0 / (1.0 + (-slope * (v - center)).exp());
                self.floor + (self.bound - self.floor) * s
            }
            RateKind::AffineClipped { offset, slope } => {
                (offset + slope * v).clamp(self.floor, self.bound)
            }
        }
    }

    pub fn to_fn(&self) -> ScalarFn {
        let spec = self.clone();
        Arc::new(move |v| spec.eval(v))
    }

    pub fn constant(value: f64) -> Self {
        RateSpec {
            kind: RateKind::Constant { value },
            bound: value,
            floor: value,
        }
    }
}

// ---------------------------------------------------------------------------
// Interacting-neuron preset
// ---------------------------------------------------------------------------

/// Parameters of the interacting-neuron system: each coordinate is a membrane
/// potential relaxing at speed `lambda` towards `v_star`; a spike of neuron
/// `i` resets it to zero and adds the synaptic weight `W[i][j]` to neuron `j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuronParams {
    pub n: usize,
    pub lambda: f64,
    pub v_star: f64,
    /// Row `i`, column `j` holds the weight from neuron `i` onto neuron `j`;
    /// the diagonal is ignored.
    pub weights: Vec<Vec<f64>>,
    pub rates: RateSpec,
}

impl NeuronParams {
    /// Uniform all-to-all weights.
    pub fn uniform(n: usize, lambda: f64, v_star: f64, weight: f64, rates: RateSpec) -> Self {
        NeuronParams {
            n,
            lambda,
            v_star,
            weights: vec![vec![weight; n]; n],
            rates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidModel("neuron count must be positive".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidModel(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.v_star > 0.0) {
            return Err(Error::InvalidModel(format!(
                "v_star must be positive, got {}",
                self.v_star
            )));
        }
        if self.weights.len() != self.n || self.weights.iter().any(|row| row.len() != self.n) {
            return Err(Error::InvalidModel(format!(
                "weight matrix must be {0} x {0}",
                self.n
            )));
        }
        for (i, row) in self.weights.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                if i != j && !(w >= 0.0 && w.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "weight {i}->{j} must be nonnegative, got {w}"
                    )));
                }
            }
        }
        self.rates.validate()
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[from][to]
    }

    /// The scalar non-interacting view of the same system.
    pub fn non_interacting_spec(&self) -> Result<NonInteractingSpec> {
        self.validate()?;
        let lambda = self.lambda;
        let v_star = self.v_star;
        let weights = self.weights.clone();
        let rates: Vec<ScalarFn> = (0..self.n).map(|_| self.rates.to_fn()).collect();
        NonInteractingSpec::new(
            self.n,
            Arc::new(move |v| -lambda * (v - v_star)),
            Arc::new(move |_| -lambda),
            Arc::new(move |i, j, _v| weights[i][j]),
            Arc::new(|_, _, _| 0.0),
            1.0,
            max_off_diagonal(&self.weights),
            rates,
            self.rates.floor,
            self.rates.bound,
            lambda,
        )
        .map(|spec| {
            spec.with_linear_drift(LinearDrift {
                rate: lambda,
                target: v_star,
            })
        })
    }
}

fn max_off_diagonal(w: &[Vec<f64>]) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in w.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                m = m.max(v.abs());
            }
        }
    }
    m
}

/// Build the full model for the interacting-neuron system:
/// `b^i(x) = -lambda (x^i - v_star)`, `Δ_i(x)^j = x^j + W[i][j]` for `j != i`
/// and `Δ_i(x)^i = 0`, rates applied coordinate-wise.
pub fn build_neuron_model(params: &NeuronParams) -> Result<ModelSpec> {
    params.validate()?;
    let n = params.n;
    let lambda = params.lambda;
    let v_star = params.v_star;

    let drift: VectorField = Arc::new(move |x: &State| x.map(|v| -lambda * (v - v_star)));
    let drift_jac: MatrixField = Arc::new(move |_x: &State| Matrix::identity(n, n) * (-lambda));

    let mut jump_maps: Vec<VectorField> = Vec::with_capacity(n);
    let mut jump_jacobians: Vec<MatrixField> = Vec::with_capacity(n);
    for i in 0..n {
        let row = params.weights[i].clone();
        jump_maps.push(Arc::new(move |x: &State| {
            let mut y = State::zeros(x.len());
            for j in 0..x.len() {
                y[j] = if j == i { 0.0 } else { x[j] + row[j] };
            }
            y
        }));
        jump_jacobians.push(Arc::new(move |x: &State| {
            let mut a = Matrix::identity(x.len(), x.len());
            a[(i, i)] = 0.0;
            a
        }));
    }

    let rates: Vec<ScalarField> = (0..n)
        .map(|i| {
            let f = params.rates.clone();
            let field: ScalarField = Arc::new(move |x: &State| f.eval(x[i]));
            field
        })
        .collect();

    Ok(ModelSpec::new(
        n,
        drift,
        jump_maps,
        jump_jacobians,
        rates,
        params.rates.bound,
    )?
    .with_drift_jacobian(drift_jac)
    .with_flags(true, true)
    .with_linear_drift(LinearDrift {
        rate: lambda,
        target: v_star,
    }))
}

/// A deliberately non-linear house-of-cards system used as a stress model:
/// ring-coupled drift `b^i(x) = -x^i + 0.5 sin(x^{i+1})`, jump shifts
/// `a_i^j(x) = 0.3 cos(x^j)` for `j != i`, rates `0.5 + 0.4 cos^2(x^i)`.
/// The drift Jacobian does not commute along the flow, so nothing here
/// collapses to the closed forms of the neuron preset.
pub fn build_ring_model(n: usize) -> Result<ModelSpec> {
    let drift: VectorField = Arc::new(move |x: &State| {
        State::from_fn(x.len(), |i, _| -x[i] + 0.5 * x[(i + 1) % x.len()].sin())
    });
    let drift_jac: MatrixField = Arc::new(move |x: &State| {
        let n = x.len();
        let mut j = Matrix::identity(n, n) * -1.0;
        for i in 0..n {
            j[(i, (i + 1) % n)] = 0.5 * x[(i + 1) % n].cos();
        }
        j
    });

    let mut jump_maps: Vec<VectorField> = Vec::with_capacity(n);
    let mut jump_jacobians: Vec<MatrixField> = Vec::with_capacity(n);
    for i in 0..n {
        jump_maps.push(Arc::new(move |x: &State| {
            State::from_fn(
                x.len(),
                |j, _| {
                    if j == i {
                        0.0
                    } else {
                        x[j] + 0.3 * x[j].cos()
                    }
                },
            )
        }));
        jump_jacobians.push(Arc::new(move |x: &State| {
            let n = x.len();
            let mut a = Matrix::zeros(n, n);
            for j in 0..n {
                if j != i {
                    a[(j, j)] = 1.0 - 0.3 * x[j].sin();
                }
            }
            a
        }));
    }

    let rates: Vec<ScalarField> = (0..n)
        .map(|i| {
            let field: ScalarField = Arc::new(move |x: &State| 0.5 + 0.4 * x[i].cos().powi(2));
            field
        })
        .collect();

    Ok(
        ModelSpec::new(n, drift, jump_maps, jump_jacobians, rates, 0.9)?
            .with_drift_jacobian(drift_jac)
            .with_flags(true, false),
    )
}

// ---------------------------------------------------------------------------
// Non-interacting specialization
// ---------------------------------------------------------------------------

/// Model in which particles only interact through jumps: scalar drift `b̃`
/// applied per coordinate, pairwise scalar jump shifts `a_i^j` acting on the
/// receiving coordinate only, and scalar rates `f_i(x^i)`.
#[derive(Clone)]
pub struct NonInteractingSpec {
    dim: usize,
    drift: ScalarFn,
    drift_prime: ScalarFn,
    pair_shift: PairFn,
    pair_shift_prime: PairFn,
    /// Lower bound `a` on `|1 + (a_i^j)'|` (invertibility margin of the
    /// receiving maps).
    pair_slope_min: f64,
    /// Upper bound `A` on all derivatives of the shifts (and on the shifts
    /// themselves).
    pair_deriv_sup: f64,
    rates: Vec<ScalarFn>,
    rate_floor: f64,
    rate_bound: f64,
    /// Upper bound `B` on `|b̃'|`; the inverse flow grows at most like
    /// `exp(B t)`.
    drift_deriv_bound: f64,
    linear_drift: Option<LinearDrift>,
}

impl NonInteractingSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        drift: ScalarFn,
        drift_prime: ScalarFn,
        pair_shift: PairFn,
        pair_shift_prime: PairFn,
        pair_slope_min: f64,
        pair_deriv_sup: f64,
        rates: Vec<ScalarFn>,
        rate_floor: f64,
        rate_bound: f64,
        drift_deriv_bound: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if rates.len() != dim {
            return Err(Error::InvalidModel(format!(
                "expected {dim} scalar rates, got {}",
                rates.len()
            )));
        }
        if !(pair_slope_min > 0.0) {
            return Err(Error::InvalidModel(format!(
                "pair map slope bound must be positive, got {pair_slope_min}"
            )));
        }
        if pair_deriv_sup < 0.0 || rate_floor < 0.0 || !(rate_bound > 0.0) {
            return Err(Error::InvalidModel(
                "constants A, f0, F must be nonnegative with F > 0".into(),
            ));
        }
        if !(drift_deriv_bound > 0.0) {
            return Err(Error::InvalidModel(format!(
                "drift derivative bound must be positive, got {drift_deriv_bound}"
            )));
        }
        Ok(Self {
            dim,
            drift,
            drift_prime,
            pair_shift,
            pair_shift_prime,
            pair_slope_min,
            pair_deriv_sup,
            rates,
            rate_floor,
            rate_bound,
            drift_deriv_bound,
            linear_drift: None,
        })
    }

    pub fn with_linear_drift(mut self, ld: LinearDrift) -> Self {
        self.linear_drift = Some(ld);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drift(&self, v: f64) -> f64 {
        (self.drift)(v)
    }

    pub fn drift_prime(&self, v: f64) -> f64 {
        (self.drift_prime)(v)
    }

    /// Receiving map `Δ_i^j(v) = v + a_i^j(v)` for `j != i`.
    pub fn pair_map(&self, i: usize, j: usize, v: f64) -> f64 {
        v + (self.pair_shift)(i, j, v)
    }

    pub fn pair_map_prime(&self, i: usize, j: usize, v: f64) -> f64 {
        1.0 + (self.pair_shift_prime)(i, j, v)
    }

    pub fn pair_slope_min(&self) -> f64 {
        self.pair_slope_min
    }

    pub fn pair_deriv_sup(&self) -> f64 {
        self.pair_deriv_sup
    }

    pub fn rate(&self, i: usize, v: f64) -> f64 {
        (self.rates[i])(v)
    }

    pub fn rate_floor(&self) -> f64 {
        self.rate_floor
    }

    pub fn rate_bound(&self) -> f64 {
        self.rate_bound
    }

    pub fn drift_deriv_bound(&self) -> f64 {
        self.drift_deriv_bound
    }

    pub fn linear_drift(&self) -> Option<LinearDrift> {
        self.linear_drift
    }

    /// Assemble the full `N`-dimensional model.
    pub fn assemble(&self) -> Result<ModelSpec> {
        let n = self.dim;
        let drift = self.drift.clone();
        let drift_prime = self.drift_prime.clone();
        let drift_field: VectorField = Arc::new(move |x: &State| x.map(|v| drift(v)));
        let drift_jac: MatrixField =
            Arc::new(move |x: &State| Matrix::from_diagonal(&x.map(|v| drift_prime(v))));

        let mut jump_maps: Vec<VectorField> = Vec::with_capacity(n);
        let mut jump_jacobians: Vec<MatrixField> = Vec::with_capacity(n);
        for i in 0..n {
            let shift = self.pair_shift.clone();
            jump_maps.push(Arc::new(move |x: &State| {
                State::from_fn(x.len(), |j, _| {
                    if j == i {
                        0.0
                    } else {
                        x[j] + shift(i, j, x[j])
                    }
                })
            }));
            let shift_prime = self.pair_shift_prime.clone();
            jump_jacobians.push(Arc::new(move |x: &State| {
                let n = x.len();
                let mut a = Matrix::zeros(n, n);
                for j in 0..n {
                    if j != i {
                        a[(j, j)] = 1.0 + shift_prime(i, j, x[j]);
                    }
                }
                a
            }));
        }

        let rates: Vec<ScalarField> = (0..n)
            .map(|i| {
                let f = self.rates[i].clone();
                let field: ScalarField = Arc::new(move |x: &State| f(x[i]));
                field
            })
            .collect();

        let mut model = ModelSpec::new(
            n,
            drift_field,
            jump_maps,
            jump_jacobians,
            rates,
            self.rate_bound,
        )?
        .with_drift_jacobian(drift_jac)
        .with_flags(true, true);
        if let Some(ld) = self.linear_drift {
            model = model.with_linear_drift(ld);
        }
        Ok(model)
    }
}

impl std::fmt::Debug for NonInteractingSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NonInteractingSpec")
            .field("dim", &self.dim)
            .field("pair_slope_min", &self.pair_slope_min)
            .field("pair_deriv_sup", &self.pair_deriv_sup)
            .field("rate_floor", &self.rate_floor)
            .field("rate_bound", &self.rate_bound)
            .field("drift_deriv_bound", &self.drift_deriv_bound)
            .finish_non_exhaustive()
    }
}

// ---------------------------------------------------------------------------
// JSON model files
// ---------------------------------------------------------------------------

/// On-disk model description. Only the neuron family is file-representable;
/// custom models are registered programmatically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelFile {
    Neuron {
        #[serde(rename = "N")]
        n: usize,
        lambda: f64,
        v_star: f64,
        weights: Vec<Vec<f64>>,
        rates: RateSpec,
    },
}

impl ModelFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("model file parse error: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model file serialization")
    }

    pub fn neuron_params(&self) -> NeuronParams {
        match self {
            ModelFile::Neuron {
                n,
                lambda,
                v_star,
                weights,
                rates,
            } => NeuronParams {
                n: *n,
                lambda: *lambda,
                v_star: *v_star,
                weights: weights.clone(),
                rates: rates.clone(),
            },
        }
    }

    pub fn build(&self) -> Result<ModelSpec> {
        build_neuron_model(&self.neuron_params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_neuron_params() -> NeuronParams {
        let mut p = NeuronParams::uniform(2, 1.0, 1.0, 0.0, RateSpec::constant(1.0));
        p.weights[0][1] = 0.2;
        p.weights[1][0] = 0.3;
        p
    }

    #[test]
    fn neuron_jump_matches_displayed_example() {
        // N=2, W[0][1] = 0.2, x = (0.5, 0.3): a jump of the first neuron
        // resets it and bumps the second to 0.5.
        let model = build_neuron_model(&two_neuron_params()).unwrap();
        let x = State::from_column_slice(&[0.5, 0.3]);
        let y = model.jump(0, &x).unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn house_of_cards_reset_is_exact() {
        let model = build_neuron_model(&two_neuron_params()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = State::from_fn(2, |_, _| rng.random_range(-10.0..10.0));
            for i in 0..2 {
                assert_eq!(model.jump(i, &x).unwrap()[i], 0.0);
            }
        }
    }

    #[test]
    fn neuron_jump_jacobian_is_punctured_identity() {
        let model = build_neuron_model(&two_neuron_params()).unwrap();
        let x = State::from_column_slice(&[0.4, -0.7]);
        let a0 = model.jump_jacobian(0, &x).unwrap();
        assert_eq!(a0[(0, 0)], 0.0);
        assert_eq!(a0[(1, 1)], 1.0);
        assert_eq!(a0[(0, 1)], 0.0);
        assert_eq!(a0[(1, 0)], 0.0);
        // Row i of A^i vanishes for house-of-cards maps.
        for j in 0..2 {
            assert_eq!(a0[(0, j)], 0.0);
        }
    }

    #[test]
    fn total_rate_sums_rates() {
        // Constant rates: N=3, f == c gives 3c; zeroing one coordinate's
        // rate of a 2-particle system leaves c.
        let p = NeuronParams::uniform(3, 1.0, 1.0, 0.1, RateSpec::constant(0.7));
        let model = build_neuron_model(&p).unwrap();
        let x = State::zeros(3);
        assert!((model.total_rate(&x) - 2.1).abs() < 1e-15);

        let drift: VectorField = Arc::new(|x: &State| -x);
        let maps: Vec<VectorField> = (0..2)
            .map(|i| {
                let m: VectorField = Arc::new(move |x: &State| {
                    let mut y = x.clone();
                    y[i] = 0.0;
                    y
                });
                m
            })
            .collect();
        let jacs: Vec<MatrixField> = (0..2)
            .map(|i| {
                let j: MatrixField = Arc::new(move |x: &State| {
                    let mut a = Matrix::identity(x.len(), x.len());
                    a[(i, i)] = 0.0;
                    a
                });
                j
            })
            .collect();
        let rates: Vec<ScalarField> = vec![Arc::new(|_: &State| 0.0), Arc::new(|_: &State| 0.7)];
        let model = ModelSpec::new(2, drift, maps, jacs, rates, 0.7).unwrap();
        assert!((model.total_rate(&State::zeros(2)) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn quadratic_clipped_rate_example() {
        // f_i(v) = min(1 + v^2, 5), x = (1, 2): total rate 2 + 5 = 7.
        let drift: VectorField = Arc::new(|x: &State| -x);
        let maps: Vec<VectorField> = (0..2)
            .map(|i| {
                let m: VectorField = Arc::new(move |x: &State| {
                    let mut y = x.clone();
                    y[i] = 0.0;
                    y
                });
                m
            })
            .collect();
        let jacs: Vec<MatrixField> = (0..2)
            .map(|i| {
                let j: MatrixField = Arc::new(move |x: &State| {
                    let mut a = Matrix::identity(x.len(), x.len());
                    a[(i, i)] = 0.0;
                    a
                });
                j
            })
            .collect();
        let rates: Vec<ScalarField> = (0..2)
            .map(|i| {
                let f: ScalarField = Arc::new(move |x: &State| (1.0 + x[i] * x[i]).min(5.0));
                f
            })
            .collect();
        let model = ModelSpec::new(2, drift, maps, jacs, rates, 5.0).unwrap();
        let x = State::from_column_slice(&[1.0, 2.0]);
        assert!((model.total_rate(&x) - 7.0).abs() < 1e-15);
        assert!(model.total_rate(&x) <= 2.0 * model.rate_bound() + 1e-12);
    }

    #[test]
    fn jump_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let neuron = build_neuron_model(&two_neuron_params()).unwrap();
        let ring = build_ring_model(3).unwrap();
        for model in [&neuron, &ring] {
            let n = model.dim();
            for _ in 0..1000 {
                let x = State::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
                for i in 0..n {
                    let analytic = model.jump_jacobian(i, &x).unwrap();
                    let fd = fd_jacobian_abs(|v| model.jump(i, v).unwrap(), &x, 1e-5);
                    let err = (&analytic - &fd).abs().max();
                    assert!(err < 1e-4, "A^{i} FD mismatch {err} at {x:?}");
                }
            }
        }
    }

    #[test]
    fn drift_jacobian_fd_fallback_close_to_analytic() {
        let ring = build_ring_model(3).unwrap();
        let x = State::from_column_slice(&[0.3, -1.2, 2.0]);
        let analytic = ring.drift_jacobian(&x);
        let fd = fd_jacobian_scaled(|v| ring.drift(v), &x, 1e-6);
        assert!((&analytic - &fd).abs().max() < 1e-7);
    }

    #[test]
    fn invalid_neuron_params_rejected() {
        let base = two_neuron_params();

        let mut p = base.clone();
        p.lambda = 0.0;
        assert!(build_neuron_model(&p).is_err());

        let mut p = base.clone();
        p.v_star = -1.0;
        assert!(build_neuron_model(&p).is_err());

        let mut p = base.clone();
        p.weights[0][1] = -0.5;
        assert!(build_neuron_model(&p).is_err());

        let mut p = base;
        p.rates.bound = 0.0;
        assert!(build_neuron_model(&p).is_err());
    }

    #[test]
    fn checked_rate_rejects_bound_violation() {
        let drift: VectorField = Arc::new(|x: &State| -x);
        let maps: Vec<VectorField> = vec![Arc::new(|x: &State| {
            let mut y = x.clone();
            y[0] = 0.0;
            y
        })];
        let jacs: Vec<MatrixField> = vec![Arc::new(|x: &State| Matrix::zeros(x.len(), x.len()))];
        let rates: Vec<ScalarField> = vec![Arc::new(|x: &State| 1.0 + x[0].abs())];
        let model = ModelSpec::new(1, drift, maps, jacs, rates, 1.5).unwrap();
        assert!(model.checked_rate(0, &State::zeros(1)).is_ok());
        let far = State::from_column_slice(&[10.0]);
        assert!(matches!(
            model.checked_rate(0, &far),
            Err(Error::RateBound { .. })
        ));
    }

    #[test]
    fn index_out_of_range_rejected() {
        let model = build_neuron_model(&two_neuron_params()).unwrap();
        let x = State::zeros(2);
        assert!(model.jump(2, &x).is_err());
        assert!(model.jump_jacobian(5, &x).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let file = ModelFile::Neuron {
            n: 2,
            lambda: 1.0,
            v_star: 1.0,
            weights: vec![vec![0.0, 0.2], vec![0.3, 0.0]],
            rates: RateSpec {
                kind: RateKind::Sigmoid {
                    center: 1.0,
                    slope: 2.0,
                },
                bound: 2.0,
                floor: 0.5,
            },
        };
        let json = file.to_json();
        let parsed = ModelFile::from_json(&json).unwrap();
        assert_eq!(json, parsed.to_json());
        let model = parsed.build().unwrap();
        assert_eq!(model.dim(), 2);
        assert!(model.house_of_cards() && model.non_interacting());
    }

    #[test]
    fn non_interacting_spec_constants_hold_on_samples() {
        // Sampled versions of the declared constants: |(pair map)'| >= a,
        // FD derivatives of the shifts bounded by A.
        let mut params = two_neuron_params();
        params.weights[0][1] = 0.35;
        let spec = params.non_interacting_spec().unwrap();
        assert_eq!(spec.pair_deriv_sup(), 0.35);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let v = rng.random_range(-10.0..10.0);
            for i in 0..2 {
                for j in 0..2 {
                    if i == j {
                        continue;
                    }
                    let slope = fd_scalar_derivative(|u| spec.pair_map(i, j, u), v, 1e-5);
                    assert!(slope.abs() >= spec.pair_slope_min() - 1e-6);
                    // Shift itself and its first FD derivative under A.
                    let shift = spec.pair_map(i, j, v) - v;
                    assert!(shift.abs() <= spec.pair_deriv_sup() + 1e-9);
                    let d1 = fd_scalar_derivative(|u| spec.pair_map(i, j, u) - u, v, 1e-5);
                    assert!(d1.abs() <= spec.pair_deriv_sup() + 1e-6);
                }
            }
            // Drift derivative within the declared bound B.
            let db = fd_scalar_derivative(|u| spec.drift(u), v, 1e-5);
            assert!(db.abs() <= spec.drift_deriv_bound() + 1e-6);
            // Rates within [floor, bound].
            let f = spec.rate(0, v);
            assert!(f >= spec.rate_floor() - 1e-12 && f <= spec.rate_bound() + 1e-12);
        }
    }

    #[test]
    fn rate_families_respect_declared_bounds() {
        let sig = RateSpec {
            kind: RateKind::Sigmoid {
                center: 0.0,
                slope: 3.0,
            },
            bound: 2.0,
            floor: 0.25,
        };
        let aff = RateSpec {
            kind: RateKind::AffineClipped {
                offset: 1.0,
                slope: 0.5,
            },
            bound: 3.0,
            floor: 0.5,
        };
        for spec in [sig, aff] {
            spec.validate().unwrap();
            for k in -100..100 {
                let v = k as f64 * 0.37;
                let f = spec.eval(v);
                assert!(f >= spec.floor - 1e-12 && f <= spec.bound + 1e-12);
            }
        }
    }
}
