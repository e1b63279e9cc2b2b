//! Invariant-measure estimation and the numerical verification of the
//! density identities: the representation formula for the invariant measure,
//! one-step propagation of a product-form density through a jump (coarea
//! change of variables), the jump-time integration-by-parts identity for the
//! first marginal, and the regularity-threshold calculator that balances the
//! inverse-flow growth against the minimal jump rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::flow::{self, IntegratorConfig, KappaOutcome};
use crate::model::{ModelSpec, NonInteractingSpec, ScalarFn};
use crate::numeric;
use crate::simulate::{self, RngSpec, StopRule, TestFunction};
use crate::stats;
use crate::State;

// ---------------------------------------------------------------------------
// Empirical measures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// States sampled at a fixed time stride along trajectories (targets the
    /// invariant measure of the process).
    TimeSampled,
    /// Pre-jump states (targets the invariant measure of the jump chain).
    JumpChain,
}

/// Weighted sample cloud approximating an invariant measure.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    samples: Vec<State>,
    weights: Vec<f64>,
    pub provenance: Provenance,
    pub seed: u64,
    pub config_hash: String,
}

impl EmpiricalMeasure {
    pub fn new(
        samples: Vec<State>,
        provenance: Provenance,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InsufficientData("no samples".into()));
        }
        if samples.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                context: "empirical measure samples".into(),
            });
        }
        let w = 1.0 / samples.len() as f64;
        let weights = vec![w; samples.len()];
        Ok(EmpiricalMeasure {
            samples,
            weights,
            provenance,
            seed,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[State] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean of `g` with the iid standard error.
    pub fn mean_of(&self, g: &dyn Fn(&State) -> f64) -> (f64, f64) {
        let mut acc = stats::Accumulator::new();
        for s in &self.samples {
            acc.push(g(s));
        }
        (acc.mean(), acc.std_error())
    }

    pub fn marginal_samples(&self, coord: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[coord]).collect()
    }
}

/// Long-run simulation layout for the invariant-measure estimate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    /// Absolute time discarded at the start of every path.
    pub burn_in: f64,
    /// Sampling stride along the trajectory (time units).
    pub stride: f64,
    pub seed: u64,
    pub paths: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 1e4,
            burn_in: 100.0,
            stride: 1.0,
            seed: 0,
            paths: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > self.burn_in && self.burn_in >= 0.0 && self.stride > 0.0)
            || self.paths == 0
        {
            return Err(Error::InvalidConfig(format!(
                "need horizon > burn_in >= 0, stride > 0, paths >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("sim config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// States of one path at the times `burn_in + k stride`.
fn sample_path_states(
    model: &ModelSpec,
    path: &simulate::PathRecord,
    sim: &SimConfig,
    cfg: &IntegratorConfig,
) -> Result<Vec<State>> {
    let mut out = Vec::new();
    let mut k = 0usize;
    let mut next = sim.burn_in;
    for (x_seg, seg_start, duration) in path.segments() {
        let seg_end = seg_start + duration;
        while next < seg_end {
            if next >= seg_start {
                out.push(flow::flow(model, &x_seg, next - seg_start, cfg)?);
            }
            k += 1;
            next = sim.burn_in + k as f64 * sim.stride;
        }
    }
    Ok(out)
}

/// Estimate the invariant measure by long-run time sampling: equal-weight
/// states at a fixed stride after burn-in, pooled over independently seeded
/// paths (one RNG stream per path, merged in path order).
pub fn estimate_invariant(
    model: &ModelSpec,
    x0: &State,
    sim: &SimConfig,
    cfg: &IntegratorConfig,
) -> Result<EmpiricalMeasure> {
    sim.validate()?;
    let per_path: Vec<Result<Vec<State>>> = (0..sim.paths)
        .into_par_iter()
        .map(|p| {
            let path = simulate::simulate_path(
                model,
                x0,
                StopRule::horizon(sim.horizon),
                RngSpec::new(sim.seed, p as u64),
                cfg,
            )?;
            sample_path_states(model, &path, sim, cfg)
        })
        .collect();
    let mut samples = Vec::new();
    for states in per_path {
        samples.extend(states?);
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData(
            "no samples survived burn-in; raise horizon".into(),
        ));
    }
    EmpiricalMeasure::new(samples, Provenance::TimeSampled, sim.seed, sim.hash())
}

/// Jump-chain variant: pre-jump states after burn-in.
pub fn estimate_jump_chain(
    model: &ModelSpec,
    x0: &State,
    sim: &SimConfig,
    cfg: &IntegratorConfig,
) -> Result<EmpiricalMeasure> {
    sim.validate()?;
    let per_path: Vec<Result<Vec<State>>> = (0..sim.paths)
        .into_par_iter()
        .map(|p| {
            let path = simulate::simulate_path(
                model,
                x0,
                StopRule::horizon(sim.horizon),
                RngSpec::new(sim.seed, p as u64),
                cfg,
            )?;
            let k0 = path
                .jump_times
                .iter()
                .position(|&t| t >= sim.burn_in)
                .unwrap_or(path.n_jumps());
            Ok(path.pre_jump_states[k0..].to_vec())
        })
        .collect();
    let mut samples = Vec::new();
    for states in per_path {
        samples.extend(states?);
    }
    EmpiricalMeasure::new(samples, Provenance::JumpChain, sim.seed, sim.hash())
}

// ---------------------------------------------------------------------------
// Grid densities (histograms and KDE)
// ---------------------------------------------------------------------------

/// One-dimensional binned density, normalized so that
/// `sum(values) * cell_width = 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDensity {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
    pub values: Vec<f64>,
    pub bandwidth: Option<f64>,
}

impl GridDensity {
    pub fn cell_width(&self) -> f64 {
        (self.max - self.min) / self.bins as f64
    }

    /// Cell centers.
    pub fn grid_points(&self) -> Vec<f64> {
        let w = self.cell_width();
        (0..self.bins)
            .map(|i| self.min + (i as f64 + 0.5) * w)
            .collect()
    }

    pub fn normalization(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_width()
    }

    fn normalize(mut self) -> Result<Self> {
        let z = self.normalization();
        if !(z > 0.0) {
            return Err(Error::InsufficientData("degenerate density grid".into()));
        }
        self.values.iter_mut().for_each(|v| *v /= z);
        Ok(self)
    }

    /// Histogram with Freedman-Diaconis bins unless a count is given.
    pub fn histogram(samples: &[f64], bins: Option<usize>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientData(
                "histogram needs >= 2 samples".into(),
            ));
        }
        let bins = bins.unwrap_or_else(|| stats::freedman_diaconis_bins(samples));
        let (lo, hi) = sample_range(samples)?;
        let width = (hi - lo) / bins as f64;
        let mut values = vec![0.0; bins];
        for &s in samples {
            let idx = (((s - lo) / width) as usize).min(bins - 1);
            values[idx] += 1.0;
        }
        GridDensity {
            min: lo,
            max: hi,
            bins,
            values,
            bandwidth: None,
        }
        .normalize()
    }

    /// Gaussian kernel estimate on a uniform grid; Silverman bandwidth
    /// unless given.
    pub fn kde(samples: &[f64], bins: usize, bandwidth: Option<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InsufficientData("KDE needs >= 2 samples".into()));
        }
        let bw = bandwidth.unwrap_or_else(|| stats::silverman_bandwidth(samples));
        if !(bw > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bandwidth must be > 0, got {bw}"
            )));
        }
        let (lo0, hi0) = sample_range(samples)?;
        let lo = lo0 - 3.0 * bw;
        let hi = hi0 + 3.0 * bw;
        let width = (hi - lo) / bins as f64;
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bw * samples.len() as f64);
        let values: Vec<f64> = (0..bins)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * width;
                norm * samples
                    .iter()
                    .map(|&s| (-0.5 * ((x - s) / bw).powi(2)).exp())
                    .sum::<f64>()
            })
            .collect();
        GridDensity {
            min: lo,
            max: hi,
            bins,
            values,
            bandwidth: Some(bw),
        }
        .normalize()
    }
}

fn sample_range(samples: &[f64]) -> Result<(f64, f64)> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::InsufficientData("all samples identical".into()));
    }
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Region of validity for the marginal-regularity statements
// ---------------------------------------------------------------------------

/// The open set `{v : (k+2) A < |v| and |b(v)| > d}` on which the first
/// marginal of the invariant measure is guaranteed smooth of order `k`.
#[derive(Clone)]
pub struct RegionSpec {
    pub d: f64,
    pub k: usize,
    pub pair_deriv_sup: f64,
    drift: ScalarFn,
}

impl RegionSpec {
    pub fn new(d: f64, k: usize, pair_deriv_sup: f64, drift: ScalarFn) -> Result<Self> {
        if !(d > 0.0) || pair_deriv_sup < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "region needs d > 0 and A >= 0, got d = {d}, A = {pair_deriv_sup}"
            )));
        }
        Ok(RegionSpec {
            d,
            k,
            pair_deriv_sup,
            drift,
        })
    }

    pub fn for_spec(spec: &NonInteractingSpec, d: f64, k: usize) -> Result<Self> {
        let s = spec.clone();
        Self::new(d, k, spec.pair_deriv_sup(), Arc::new(move |v| s.drift(v)))
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.k + 2) as f64 * self.pair_deriv_sup < v.abs() && (self.drift)(v).abs() > self.d
    }

    /// Whether `d` clears the margin `(k+2) A B` required by the regularity
    /// statement.
    pub fn margin_ok(&self, drift_deriv_bound: f64) -> bool {
        self.d > (self.k + 2) as f64 * self.pair_deriv_sup * drift_deriv_bound
    }
}

impl std::fmt::Debug for RegionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegionSpec")
            .field("d", &self.d)
            .field("k", &self.k)
            .field("pair_deriv_sup", &self.pair_deriv_sup)
            .finish_non_exhaustive()
    }
}

/// Suprema of central finite-difference derivatives of orders `1..=order`
/// of a grid density, evaluated only at grid points whose whole stencil lies
/// inside the region. Diagnostic, not proof.
pub fn smoothness_probe(gd: &GridDensity, region: &RegionSpec, order: usize) -> Result<Vec<f64>> {
    if order == 0 {
        return Ok(Vec::new());
    }
    let xs = gd.grid_points();
    let inside: Vec<bool> = xs.iter().map(|&x| region.contains(x)).collect();
    let n_inside = inside.iter().filter(|b| **b).count();
    if n_inside == 0 {
        return Err(Error::Domain("region contains no grid points".into()));
    }
    if n_inside < 4 * order {
        return Err(Error::InsufficientData(format!(
            "only {n_inside} grid points inside the region; need >= {}",
            4 * order
        )));
    }
    let h = gd.cell_width();

    // Iterated central-difference stencil: convolving [-1/2, 0, 1/2] with
    // itself m times approximates the m-th derivative at O(h^2).
    let mut stencil = vec![1.0];
    let mut out = Vec::with_capacity(order);
    for m in 1..=order {
        let base = [-0.5, 0.0, 0.5];
        let mut next = vec![0.0; stencil.len() + 2];
        for (i, &c) in stencil.iter().enumerate() {
            for (j, &b) in base.iter().enumerate() {
                next[i + j] += c * b;
            }
        }
        stencil = next;
        let half = m;
        let mut sup: f64 = f64::NEG_INFINITY;
        for idx in half..gd.bins.saturating_sub(half) {
            if !(idx - half..=idx + half).all(|j| inside[j]) {
                continue;
            }
            let mut acc = 0.0;
            for (o, &c) in stencil.iter().enumerate() {
                acc += c * gd.values[idx - half + o];
            }
            sup = sup.max((acc / h.powi(m as i32)).abs());
        }
        if !sup.is_finite() {
            return Err(Error::InsufficientData(format!(
                "no grid point has a full order-{m} stencil inside the region"
            )));
        }
        out.push(sup);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Representation formula
// ---------------------------------------------------------------------------

/// Monte Carlo + quadrature estimate of one side of an identity.
#[derive(Debug, Clone, Serialize)]
pub struct RepresentationEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Samples whose time integral hit the `max_time` cap before the
    /// survival dropped below `trunc_eps`.
    pub truncation_capped: usize,
}

/// Per-sample inner value of the representation formula:
/// `sum_i f_i(x) int_0^inf e(Delta_i(x), t) g(gamma_t(Delta_i(x))) dt`,
/// truncated once the survival falls below `cfg.trunc_eps` (capped at
/// `cfg.max_time`). Returns `(value, capped)`.
fn representation_inner(
    model: &ModelSpec,
    x: &State,
    g: &(dyn Fn(&State) -> f64 + Sync),
    cfg: &IntegratorConfig,
) -> Result<(f64, bool)> {
    let mut total = 0.0;
    let mut capped = false;
    for i in 0..model.dim() {
        let fi = model.rate(i, x);
        if fi == 0.0 {
            continue;
        }
        let y = model.jump(i, x)?;
        let mut integral = 0.0;
        let mut lambda = 0.0;
        let mut prev: Option<(f64, f64, f64)> = None;
        let mut hit_eps = false;
        flow::walk_flow(model, &y, cfg.max_time, cfg, |s, state| {
            let fbar = model.total_rate(state);
            let mut survival_here = 1.0;
            if let Some((sp, fp, _)) = prev {
                lambda += 0.5 * (fp + fbar) * (s - sp);
                survival_here = (-lambda).exp();
            }
            let integrand = survival_here * g(state);
            if let Some((sp, _, ip)) = prev {
                integral += 0.5 * (ip + integrand) * (s - sp);
            }
            prev = Some((s, fbar, integrand));
            if survival_here < cfg.trunc_eps {
                hit_eps = true;
                return false;
            }
            true
        })?;
        if !hit_eps {
            capped = true;
        }
        total += fi * integral;
    }
    Ok((total, capped))
}

/// Right-hand side of the representation formula, averaged over the
/// empirical measure.
pub fn representation_rhs(
    model: &ModelSpec,
    measure: &EmpiricalMeasure,
    g: &(dyn Fn(&State) -> f64 + Sync),
    cfg: &IntegratorConfig,
) -> Result<RepresentationEstimate> {
    let per_sample: Vec<Result<(f64, bool)>> = measure
        .samples()
        .par_iter()
        .map(|x| representation_inner(model, x, g, cfg))
        .collect();
    let mut acc = stats::Accumulator::new();
    let mut capped = 0usize;
    for r in per_sample {
        let (v, c) = r?;
        acc.push(v);
        capped += c as usize;
    }
    Ok(RepresentationEstimate {
        value: acc.mean(),
        std_error: acc.std_error(),
        truncation_capped: capped,
    })
}

/// Paired check of `m(g) = representation_rhs(g)`: the residual is averaged
/// per sample, so the finite-sample bias of the measure cancels to first
/// order.
pub fn representation_check(
    model: &ModelSpec,
    measure: &EmpiricalMeasure,
    g: &(dyn Fn(&State) -> f64 + Sync),
    cfg: &IntegratorConfig,
) -> Result<simulate::IdentityCheck> {
    let per_sample: Vec<Result<(f64, f64)>> = measure
        .samples()
        .par_iter()
        .map(|x| representation_inner(model, x, g, cfg).map(|(v, _)| (v, g(x))))
        .collect();
    let mut rhs = stats::Accumulator::new();
    let mut lhs = stats::Accumulator::new();
    let mut diff = stats::Accumulator::new();
    for r in per_sample {
        let (v, gx) = r?;
        rhs.push(v);
        lhs.push(gx);
        diff.push(gx - v);
    }
    Ok(simulate::IdentityCheck {
        lhs: lhs.mean(),
        rhs: rhs.mean(),
        residual: diff.mean(),
        residual_se: diff.std_error(),
    })
}

// ---------------------------------------------------------------------------
// Coarea one-step propagation
// ---------------------------------------------------------------------------

/// Compactly supported scalar density factor `r` of the product-form input
/// `nu(x) = fbar(x) prod_i r(x^i)`.
#[derive(Clone)]
pub struct ScalarDensity {
    f: ScalarFn,
    pub support: (f64, f64),
}

impl ScalarDensity {
    pub fn new(f: ScalarFn, support: (f64, f64)) -> Result<Self> {
        if !(support.1 > support.0) {
            return Err(Error::InvalidConfig(format!(
                "empty support [{}, {}]",
                support.0, support.1
            )));
        }
        Ok(ScalarDensity { f, support })
    }

    /// `amplitude * exp(-1 / (1 - u^2))` on `(lo, hi)` with
    /// `u = 2 (v - lo)/(hi - lo) - 1`; infinitely differentiable with
    /// compact support.
    pub fn smooth_bump(lo: f64, hi: f64, amplitude: f64) -> Result<Self> {
        let f: ScalarFn = Arc::new(move |v: f64| {
            let u = 2.0 * (v - lo) / (hi - lo) - 1.0;
            if u.abs() >= 1.0 {
                0.0
            } else {
                amplitude * (-1.0 / (1.0 - u * u)).exp()
            }
        });
        Self::new(f, (lo, hi))
    }

    pub fn eval(&self, v: f64) -> f64 {
        if v <= self.support.0 || v >= self.support.1 {
            0.0
        } else {
            (self.f)(v)
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let inner = self.f.clone();
        ScalarDensity {
            f: Arc::new(move |v| c * inner(v)),
            support: self.support,
        }
    }

    /// `int r(v) dv` by adaptive Simpson over the support.
    pub fn mass(&self) -> f64 {
        numeric::adaptive_simpson(|v| self.eval(v), self.support.0, self.support.1, 1e-12)
    }
}

impl std::fmt::Debug for ScalarDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ScalarDensity(support {:?})", self.support)
    }
}

/// `C(f_i, nu) = int r(v) f_i(v) dv` over the support of `r` (adaptive
/// Simpson to 1e-10 absolute).
pub fn coarea_constant(spec: &NonInteractingSpec, r: &ScalarDensity, i: usize) -> f64 {
    numeric::adaptive_simpson(
        |v| r.eval(v) * spec.rate(i, v),
        r.support.0,
        r.support.1,
        1e-10,
    )
}

/// Rescale `r` so that `nu(x) = fbar(x) prod_i r(x^i)` integrates to one:
/// with `rho = int r` and `C_j = int r f_j`, the mass of `nu` is
/// `c^N rho^(N-1) sum_j C_j` under `r -> c r`.
pub fn normalize_regeneration(
    spec: &NonInteractingSpec,
    r: &ScalarDensity,
) -> Result<ScalarDensity> {
    let rho = r.mass();
    if !(rho > 0.0) {
        return Err(Error::InvalidConfig("density factor has zero mass".into()));
    }
    let c_sum: f64 = (0..spec.dim()).map(|j| coarea_constant(spec, r, j)).sum();
    if !(c_sum > 0.0) {
        return Err(Error::InvalidConfig(
            "rates vanish on the support of the density factor".into(),
        ));
    }
    let mass = rho.powi(spec.dim() as i32 - 1) * c_sum;
    Ok(r.scaled(mass.powf(-1.0 / spec.dim() as f64)))
}

/// Invert the receiving map `v -> Delta_i^j(v) = v + a_i^j(v)` (monotone
/// with slope bounded away from zero).
fn pair_map_inverse(spec: &NonInteractingSpec, i: usize, j: usize, u: f64) -> Result<f64> {
    // First-order guess; exact for constant shifts.
    let guess = u - (spec.pair_map(i, j, u) - u);
    if (spec.pair_map(i, j, guess) - u).abs() < 1e-13 {
        return Ok(guess);
    }
    let g = |v: f64| spec.pair_map(i, j, v) - u;
    let mut width = 1.0f64.max(u.abs() * 0.5);
    for _ in 0..80 {
        let (lo, hi) = (guess - width, guess + width);
        if g(lo).signum() != g(hi).signum() {
            return numeric::bisect(g, lo, hi, 1e-13);
        }
        width *= 2.0;
    }
    Err(Error::Domain(format!(
        "could not bracket the inverse of the receiving map {i}->{j} at {u}"
    )))
}

/// One-step pushforward evaluator: the density of the next jump-chain state
/// given the current one distributed as `nu(x) = fbar(x) prod r(x^i)`, split
/// by jumping particle.
pub struct CoareaOperator {
    spec: NonInteractingSpec,
    model: ModelSpec,
    r: ScalarDensity,
    constants: Vec<f64>,
}

impl CoareaOperator {
    pub fn new(spec: &NonInteractingSpec, r: ScalarDensity) -> Result<Self> {
        let model = spec.assemble()?;
        let constants = (0..spec.dim())
            .map(|i| coarea_constant(spec, &r, i))
            .collect();
        Ok(CoareaOperator {
            spec: spec.clone(),
            model,
            r,
            constants,
        })
    }

    pub fn density_factor(&self) -> &ScalarDensity {
        &self.r
    }

    /// `q_i(y)`: contribution of a jump of particle `i` to the density of
    /// the next jump-chain state at `y`. Zero off the forward orbit of the
    /// origin in coordinate `i`; a domain error at or beyond the flow limit,
    /// where the change of variables degenerates.
    pub fn q(&self, i: usize, y: &State, cfg: &IntegratorConfig) -> Result<f64> {
        let n = self.spec.dim();
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, dim: n });
        }
        if y.len() != n {
            return Err(Error::InvalidConfig(format!(
                "state has {} coordinates, model has {n}",
                y.len()
            )));
        }
        let yi = y[i];
        let t = match flow::kappa_classified(&self.spec, yi, cfg)? {
            KappaOutcome::Reached(t) => t,
            KappaOutcome::WrongSide => return Ok(0.0),
            KappaOutcome::AtOrBeyondLimit(limit) => {
                return Err(Error::Domain(match limit {
                    Some(l) => format!(
                        "coordinate {i} = {yi} at/beyond the flow limit {l}; density undefined"
                    ),
                    None => {
                        format!("coordinate {i} = {yi} beyond the reachable range within max_time")
                    }
                }))
            }
        };
        self.q_at_inversion_time(i, y, t, cfg)
    }

    /// `q_i(y)` with the flow inversion time of the jumping coordinate
    /// already known (`y[i] = gamma_t(0)`).
    fn q_at_inversion_time(
        &self,
        i: usize,
        y: &State,
        t: f64,
        cfg: &IntegratorConfig,
    ) -> Result<f64> {
        let n = self.spec.dim();
        let yi = y[i];
        // Reconstruct the pre-image of every receiving coordinate and pick
        // up the change-of-variables factors.
        let mut product = 1.0;
        let mut post_jump = State::zeros(n);
        for j in 0..n {
            if j == i {
                post_jump[j] = 0.0;
                continue;
            }
            let u = flow::scalar_flow_inverse(&self.spec, t, y[j], cfg)?;
            let x_j = pair_map_inverse(&self.spec, i, j, u)?;
            let r_val = self.r.eval(x_j);
            if r_val == 0.0 {
                return Ok(0.0);
            }
            let (_, z_t) = flow::scalar_variational(&self.spec, u, t, cfg);
            let lambda_ij = z_t / self.spec.pair_map_prime(i, j, x_j);
            product *= r_val * lambda_ij.abs();
            post_jump[j] = u;
        }

        // Survival from the reconstructed post-jump configuration: the
        // backward-flow integral collapses onto the forward flow.
        let e_tilde = flow::survival(&self.model, &post_jump, t, cfg)?;
        let fbar_y = (0..n).map(|j| self.spec.rate(j, y[j])).sum::<f64>();
        let b_yi = self.spec.drift(yi).abs();
        Ok(self.constants[i] * product * e_tilde * fbar_y / b_yi)
    }

    /// Sum over jumping particles: the full one-step density at `y`.
    pub fn density(&self, y: &State, cfg: &IntegratorConfig) -> Result<f64> {
        (0..self.spec.dim()).map(|i| self.q(i, y, cfg)).sum()
    }

    /// Bounding box of the support of `q_i`: coordinate `i` spans the
    /// forward orbit of the origin, every receiving coordinate the flow
    /// image of the shifted support of `r` (padded).
    pub fn support_box(&self, i: usize, cfg: &IntegratorConfig) -> Result<Vec<(f64, f64)>> {
        let n = self.spec.dim();
        let own_limit = match self.spec.linear_drift() {
            Some(ld) => ld.target,
            None => flow::scalar_flow(&self.spec, 0.0, cfg.max_time, cfg),
        };
        let (own_lo, own_hi) = (0.0f64.min(own_limit), 0.0f64.max(own_limit));
        let (rl, rh) = self.r.support;
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            if j == i {
                out.push((own_lo, own_hi));
                continue;
            }
            let a = self.spec.pair_map(i, j, rl);
            let b = self.spec.pair_map(i, j, rh);
            let asym = self
                .spec
                .linear_drift()
                .map(|ld| ld.target)
                .unwrap_or(0.5 * (a + b));
            let lo = a.min(b).min(asym);
            let hi = a.max(b).max(asym);
            let pad = 0.05 * (hi - lo).max(1e-3);
            out.push((lo - pad, hi + pad));
        }
        Ok(out)
    }

    /// `sum_i int g(y) q_i(y) dy` by a tensor midpoint rule on the support,
    /// with the jumping coordinate parametrized by flow time (the density's
    /// `1/|b|` factor makes a plain grid in `y^i` singular near the flow
    /// limit) and the receiving coordinates gridded inside their
    /// time-dependent support window, which shrinks towards the asymptote.
    pub fn expectation(
        &self,
        g: &(dyn Fn(&State) -> f64 + Sync),
        cells: usize,
        cfg: &IntegratorConfig,
    ) -> Result<f64> {
        Ok(self.expectations(&[g], cells, cfg)?[0])
    }

    /// Several observables against the one-step density in a single sweep
    /// (the density evaluation dominates the cost).
    pub fn expectations(
        &self,
        gs: &[&(dyn Fn(&State) -> f64 + Sync)],
        cells: usize,
        cfg: &IntegratorConfig,
    ) -> Result<Vec<f64>> {
        let n = self.spec.dim();
        let (rl, rh) = self.r.support;
        // The survival factor decays at least like exp(-N f0 t) for a
        // positive rate floor; otherwise fall back to the configured cap.
        let floor_rate = (n as f64 * self.spec.rate_floor()).max(0.05);
        let t_cap = cfg.max_time.min(-(1e-12f64.ln()) / floor_rate);
        let t_cells = 4 * cells;
        let dt = t_cap / t_cells as f64;

        // Slices are independent; evaluate them in parallel and sum in a
        // fixed order so the result does not depend on the worker count.
        let slices: Vec<Result<Vec<f64>>> = (0..n * t_cells)
            .into_par_iter()
            .map(|flat| {
                let i = flat / t_cells;
                let m = flat % t_cells;
                let t = (m as f64 + 0.5) * dt;
                let yi = flow::scalar_flow(&self.spec, 0.0, t, cfg);
                let weight_t = self.spec.drift(yi).abs() * dt;

                // Receiving windows: the flow image of the shifted support.
                let others: Vec<usize> = (0..n).filter(|j| *j != i).collect();
                let mut axes: Vec<(f64, f64)> = Vec::with_capacity(others.len());
                let mut vol = weight_t;
                for &j in &others {
                    let a = flow::scalar_flow(&self.spec, self.spec.pair_map(i, j, rl), t, cfg);
                    let b = flow::scalar_flow(&self.spec, self.spec.pair_map(i, j, rh), t, cfg);
                    let (lo, hi) = (a.min(b), a.max(b));
                    axes.push((lo, (hi - lo) / cells as f64));
                    vol *= (hi - lo) / cells as f64;
                }

                let mut slice = vec![0.0; gs.len()];
                let mut idx = vec![0usize; others.len()];
                let mut y = State::zeros(n);
                y[i] = yi;
                'grid: loop {
                    for (o, &j) in others.iter().enumerate() {
                        y[j] = axes[o].0 + (idx[o] as f64 + 0.5) * axes[o].1;
                    }
                    let q = self.q_at_inversion_time(i, &y, t, cfg)? * vol;
                    for (s, g) in slice.iter_mut().zip(gs) {
                        *s += q * g(&y);
                    }
                    let mut c = 0;
                    loop {
                        if c == others.len() {
                            break 'grid;
                        }
                        idx[c] += 1;
                        if idx[c] < cells {
                            break;
                        }
                        idx[c] = 0;
                        c += 1;
                    }
                }
                Ok(slice)
            })
            .collect();

        let mut totals = vec![0.0; gs.len()];
        for slice in slices {
            for (t, s) in totals.iter_mut().zip(slice?) {
                *t += s;
            }
        }
        Ok(totals)
    }

    /// Mass `sum_i int q_i(y) dy` (one for a normalized input density).
    pub fn total_mass(&self, cells: usize, cfg: &IntegratorConfig) -> Result<f64> {
        self.expectation(&|_| 1.0, cells, cfg)
    }
}

/// One-off evaluation of `q_i(y)`.
pub fn coarea_propagate(
    spec: &NonInteractingSpec,
    r: &ScalarDensity,
    i: usize,
    y: &State,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    CoareaOperator::new(spec, r.clone())?.q(i, y, cfg)
}

/// Closed form of `q_i` for the neuron system with constant rates `f` and
/// constant shifts `a`:
/// `C (N f / lambda) (v* - y^i)^(N f/lambda - N) / v*^(N f/lambda - N + 1)
///  prod_{j != i} r(v* (y^j - y^i)/(v* - y^i) - a)` on `0 <= y^i < v*`,
/// with `C = f int r`.
#[allow(clippy::too_many_arguments)]
pub fn coarea_closed_form(
    lambda: f64,
    v_star: f64,
    n: usize,
    rate: f64,
    shift: f64,
    r: &ScalarDensity,
    i: usize,
    y: &State,
) -> f64 {
    let yi = y[i];
    if !(0.0..v_star).contains(&yi) {
        return 0.0;
    }
    let c = rate * r.mass();
    let exponent = n as f64 * rate / lambda - n as f64;
    let mut q =
        c * (n as f64 * rate / lambda) * (v_star - yi).powf(exponent) / v_star.powf(exponent + 1.0);
    for j in 0..n {
        if j == i {
            continue;
        }
        q *= r.eval(v_star * (y[j] - yi) / (v_star - yi) - shift);
    }
    q
}

// ---------------------------------------------------------------------------
// Integration by parts for the first marginal
// ---------------------------------------------------------------------------

/// Scalar test function with analytic first and second derivatives and a
/// declared compact support.
#[derive(Clone)]
pub struct IppFunction {
    pub name: String,
    f: ScalarFn,
    deriv: ScalarFn,
    deriv2: ScalarFn,
    pub support: (f64, f64),
}

impl IppFunction {
    pub fn new(
        name: impl Into<String>,
        f: ScalarFn,
        deriv: ScalarFn,
        deriv2: ScalarFn,
        support: (f64, f64),
    ) -> Self {
        IppFunction {
            name: name.into(),
            f,
            deriv,
            deriv2,
            support,
        }
    }

    /// `sin^4(pi u)` bump on `[lo, hi]` (`u` the affine coordinate): twice
    /// continuously differentiable with both derivatives vanishing at the
    /// boundary.
    pub fn sin4_bump(lo: f64, hi: f64) -> Self {
        let l = hi - lo;
        let p = std::f64::consts::PI / l;
        let inside = move |v: f64| v > lo && v < hi;
        let f: ScalarFn = Arc::new(move |v| {
            if inside(v) {
                ((v - lo) * p).sin().powi(4)
            } else {
                0.0
            }
        });
        let deriv: ScalarFn = Arc::new(move |v| {
            if inside(v) {
                let s = ((v - lo) * p).sin();
                let c = ((v - lo) * p).cos();
                4.0 * s.powi(3) * c * p
            } else {
                0.0
            }
        });
        let deriv2: ScalarFn = Arc::new(move |v| {
            if inside(v) {
                let s = ((v - lo) * p).sin();
                let c = ((v - lo) * p).cos();
                (12.0 * s.powi(2) * c.powi(2) - 4.0 * s.powi(4)) * p * p
            } else {
                0.0
            }
        });
        IppFunction::new(format!("sin4[{lo:.3},{hi:.3}]"), f, deriv, deriv2, (lo, hi))
    }

    pub fn eval(&self, v: f64) -> f64 {
        (self.f)(v)
    }

    pub fn deriv(&self, v: f64) -> f64 {
        (self.deriv)(v)
    }

    pub fn deriv2(&self, v: f64) -> f64 {
        (self.deriv2)(v)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_on_support(&*self.f, self.support)
    }
}

impl std::fmt::Debug for IppFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "IppFunction({}, support {:?})", self.name, self.support)
    }
}

fn sup_on_support(f: &dyn Fn(f64) -> f64, support: (f64, f64)) -> f64 {
    let n = 512;
    (0..=n)
        .map(|k| {
            let v = support.0 + (support.1 - support.0) * k as f64 / n as f64;
            f(v).abs()
        })
        .fold(0.0, f64::max)
}

/// Result of the one-level integration-by-parts identity.
#[derive(Debug, Clone, Serialize)]
pub struct IppReport {
    /// `pi_H(g'')`.
    pub lhs: f64,
    /// `pi_{G(H)}(g')`.
    pub rhs_flow: f64,
    /// `sum_i pi_{G_i(H)}([g o Delta_i^1]')`.
    pub rhs_jump: f64,
    /// Mean of the per-sample residual `lhs - rhs_flow + rhs_jump`.
    pub residual: f64,
    pub residual_se: f64,
    /// Largest per-sample violation of the exact time integration by parts
    /// (a pure quadrature diagnostic; statistically zero).
    pub quadrature_residual: f64,
}

impl IppReport {
    /// Residual within `sigmas` standard errors plus the measured quadrature
    /// floor (in dimension one the identity is exact per sample, so the
    /// residual is pure quadrature error with a near-zero SE).
    pub fn holds(&self, sigmas: f64) -> bool {
        self.residual.abs() <= sigmas * self.residual_se + self.quadrature_residual
    }
}

struct IppPieces {
    lhs: f64,
    rhs_flow: f64,
    rhs_jump: f64,
    boundary: f64,
}

/// `G(H)(x) = ([fbar H](x) - <grad H, b>(x) + H(x) b'(x^1)) / b(x^1)`.
fn operator_g(spec: &NonInteractingSpec, model: &ModelSpec, h: &TestFunction, x: &State) -> f64 {
    let hx = h.eval(x);
    let fbar = model.total_rate(x);
    let grad_dot_b = h.gradient(x).dot(&model.drift(x));
    (fbar * hx - grad_dot_b + hx * spec.drift_prime(x[0])) / spec.drift(x[0])
}

/// `G_i(H)(x) = f_i(x) H(Delta_i(x)) / (b(Delta_i^1(x^1)) (Delta_i^1)'(x^1))`
/// for receiving coordinate 1 and jumping particle `i != 1` (0-based
/// `i >= 1`).
fn operator_g_i(
    spec: &NonInteractingSpec,
    model: &ModelSpec,
    h: &TestFunction,
    i: usize,
    x: &State,
) -> Result<f64> {
    let mapped = spec.pair_map(i, 0, x[0]);
    let post = model.jump(i, x)?;
    Ok(model.rate(i, x) * h.eval(&post) / (spec.drift(mapped) * spec.pair_map_prime(i, 0, x[0])))
}

fn ipp_pieces(
    spec: &NonInteractingSpec,
    model: &ModelSpec,
    h: &TestFunction,
    g: &IppFunction,
    x: &State,
    cfg: &IntegratorConfig,
) -> Result<IppPieces> {
    let n = model.dim();
    let mut lhs = 0.0;
    let mut rhs_flow = 0.0;
    let mut rhs_jump = 0.0;
    let mut boundary = 0.0;

    // Integration window: for monotone closed-form flows the integrands die
    // once the first coordinate has left every relevant support for good.
    let mut upper = g.support.1;
    let mut lower = g.support.0;
    for i in 1..n {
        let a = pair_map_inverse(spec, i, 0, g.support.0)?;
        let b = pair_map_inverse(spec, i, 0, g.support.1)?;
        lower = lower.min(a.min(b));
        upper = upper.max(a.max(b));
    }

    for j in 0..n {
        let fj = model.rate(j, x);
        if fj == 0.0 {
            continue;
        }
        let y = model.jump(j, x)?;

        // Boundary term of the time integration by parts at t = 0.
        let y1 = y[0];
        boundary += fj * g.deriv(y1) * h.eval(&y) / spec.drift(y1);

        let t_stop = integration_window(spec, y1, lower, upper, cfg);
        if t_stop == 0.0 {
            continue;
        }

        let mut lambda = 0.0;
        let mut int_lhs = 0.0;
        let mut int_flow = 0.0;
        let mut int_jump = 0.0;
        let mut prev: Option<(f64, f64, f64, f64, f64)> = None;
        flow::walk_flow(model, &y, t_stop.min(cfg.max_time), cfg, |s, state| {
            let fbar = model.total_rate(state);
            let mut survival_here = 1.0;
            if let Some((sp, fp, ..)) = prev {
                lambda += 0.5 * (fp + fbar) * (s - sp);
                survival_here = (-lambda).exp();
            }
            let v1 = state[0];
            let lhs_val = {
                let g2 = g.deriv2(v1);
                if g2 == 0.0 {
                    0.0
                } else {
                    survival_here * h.eval(state) * g2
                }
            };
            let flow_val = {
                let g1 = g.deriv(v1);
                if g1 == 0.0 {
                    0.0
                } else {
                    survival_here * operator_g(spec, model, h, state) * g1
                }
            };
            let mut jump_val = 0.0;
            for i in 1..n {
                let mapped = spec.pair_map(i, 0, v1);
                let g1 = g.deriv(mapped);
                if g1 == 0.0 {
                    continue;
                }
                let composed_deriv = g1 * spec.pair_map_prime(i, 0, v1);
                jump_val += survival_here
                    * operator_g_i(spec, model, h, i, state).expect("index valid")
                    * composed_deriv;
            }
            if let Some((sp, _, pl, pf, pj)) = prev {
                let dt = s - sp;
                int_lhs += 0.5 * (pl + lhs_val) * dt;
                int_flow += 0.5 * (pf + flow_val) * dt;
                int_jump += 0.5 * (pj + jump_val) * dt;
            }
            prev = Some((s, fbar, lhs_val, flow_val, jump_val));
            survival_here >= cfg.trunc_eps
        })?;

        lhs += fj * int_lhs;
        rhs_flow += fj * int_flow;
        rhs_jump += fj * int_jump;
    }
    Ok(IppPieces {
        lhs,
        rhs_flow,
        rhs_jump,
        boundary,
    })
}

/// Last time the scalar flow from `y1` can still touch `[lower, upper]`;
/// infinity when no closed form rules it out.
fn integration_window(
    spec: &NonInteractingSpec,
    y1: f64,
    lower: f64,
    upper: f64,
    cfg: &IntegratorConfig,
) -> f64 {
    let Some(ld) = spec.linear_drift() else {
        return f64::INFINITY;
    };
    if !cfg.use_closed_form {
        return f64::INFINITY;
    }
    let dir = ld.target - y1;
    if dir == 0.0 {
        return if (lower..=upper).contains(&y1) {
            f64::INFINITY
        } else {
            0.0
        };
    }
    let exit = if dir > 0.0 { upper } else { lower };
    if (dir > 0.0 && y1 > exit) || (dir < 0.0 && y1 < exit) {
        return 0.0;
    }
    let ratio = (ld.target - exit) / (ld.target - y1);
    if ratio <= 0.0 {
        // Exit point beyond the asymptote: the flow never leaves the window.
        return f64::INFINITY;
    }
    -ratio.ln() / ld.rate
}

/// Check the one-level integration-by-parts identity
/// `pi_H(g'') = pi_{G(H)}(g') - sum_i pi_{G_i(H)}([g o Delta_i^1]')` over an
/// empirical measure. The support of `g` must lie inside the region.
pub fn ipp_check(
    spec: &NonInteractingSpec,
    model: &ModelSpec,
    h: &TestFunction,
    g: &IppFunction,
    measure: &EmpiricalMeasure,
    region: &RegionSpec,
    cfg: &IntegratorConfig,
) -> Result<IppReport> {
    let n_check = 256;
    for k in 0..=n_check {
        let v = g.support.0 + (g.support.1 - g.support.0) * k as f64 / n_check as f64;
        if !region.contains(v) && g.eval(v) != 0.0 {
            return Err(Error::Precondition(format!(
                "support of {} leaves the region at v = {v}",
                g.name
            )));
        }
    }

    let per_sample: Vec<Result<IppPieces>> = measure
        .samples()
        .par_iter()
        .map(|x| ipp_pieces(spec, model, h, g, x, cfg))
        .collect();

    let mut lhs = stats::Accumulator::new();
    let mut rhs_flow = stats::Accumulator::new();
    let mut rhs_jump = stats::Accumulator::new();
    let mut residual = stats::Accumulator::new();
    let mut quad_res: f64 = 0.0;
    for p in per_sample {
        let p = p?;
        lhs.push(p.lhs);
        rhs_flow.push(p.rhs_flow);
        rhs_jump.push(p.rhs_jump);
        residual.push(p.lhs - p.rhs_flow + p.rhs_jump);
        // Exact per-sample identity: int e H g'' dt = -bdry + int e G(H) g' dt.
        quad_res = quad_res.max((p.lhs + p.boundary - p.rhs_flow).abs());
    }
    Ok(IppReport {
        lhs: lhs.mean(),
        rhs_flow: rhs_flow.mean(),
        rhs_jump: rhs_jump.mean(),
        residual: residual.mean(),
        residual_se: residual.std_error(),
        quadrature_residual: quad_res,
    })
}

/// One-dimensional derivative bound `|m(g')| <= 2 C(eps) |g|_inf` with
/// `eps = inf |b|` and `C(eps) = sup (f + |b'|) / eps`, both over the
/// support of `g`.
#[derive(Debug, Clone, Serialize)]
pub struct DerivativeBound {
    pub lhs: f64,
    pub lhs_se: f64,
    pub bound: f64,
    pub eps: f64,
    pub holds: bool,
}

pub fn derivative_bound_check(
    spec: &NonInteractingSpec,
    measure: &EmpiricalMeasure,
    g: &IppFunction,
) -> Result<DerivativeBound> {
    if spec.dim() != 1 {
        return Err(Error::Precondition(
            "the derivative bound applies to the one-dimensional case".into(),
        ));
    }
    let n = 512;
    let mut eps = f64::INFINITY;
    let mut c_sup: f64 = 0.0;
    for k in 0..=n {
        let v = g.support.0 + (g.support.1 - g.support.0) * k as f64 / n as f64;
        eps = eps.min(spec.drift(v).abs());
        c_sup = c_sup.max(spec.rate(0, v) + spec.drift_prime(v).abs());
    }
    if !(eps > 0.0) {
        return Err(Error::Precondition(
            "support of g touches an equilibrium of the flow".into(),
        ));
    }
    let (lhs, lhs_se) = measure.mean_of(&|x: &State| g.deriv(x[0]));
    let bound = 2.0 * (c_sup / eps) * g.sup_norm();
    Ok(DerivativeBound {
        lhs: lhs.abs(),
        lhs_se,
        bound,
        eps,
        holds: lhs.abs() <= bound,
    })
}

// ---------------------------------------------------------------------------
// Regularity threshold
// ---------------------------------------------------------------------------

/// Largest guaranteed differentiability order of the invariant density.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct Threshold {
    /// Largest integer with `B k < N f0 - (N-1) B` (may be negative).
    pub k_star: i64,
    /// Some order is actually guaranteed (`k_star >= 0`). Always false for
    /// `f0 = 0`: a vanishing rate floor yields no guarantee.
    pub guaranteed: bool,
}

/// Solve `B k < N f0 - (N-1) B` for the largest integer `k`. For the neuron
/// system `B = lambda`.
pub fn regularity_threshold(n: u32, f0: f64, b: f64) -> Result<Threshold> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one particle".into()));
    }
    if !(b > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "inverse-flow rate bound must be positive, got {b}"
        )));
    }
    if !(f0 >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "rate floor must be nonnegative, got {f0}"
        )));
    }
    let bound = n as f64 * f0 / b - (n as f64 - 1.0);
    let k_star = (bound.ceil() - 1.0) as i64;
    Ok(Threshold {
        k_star,
        guaranteed: k_star >= 0,
    })
}

// ---------------------------------------------------------------------------
