//! `verify-identities`: one machine-readable report line per distributional
//! identity, each with both sides, the residual and its tolerance.

use serde::Serialize;

use pdmp::density::{
    derivative_bound_check, estimate_invariant, ipp_check, representation_check,
    representation_rhs, EmpiricalMeasure, IppFunction, RegionSpec,
};
use pdmp::model::{ModelSpec, NeuronParams, NonInteractingSpec};
use pdmp::simulate::{
    jump_chain_identity, simulate_path, stationarity_residual, test_suite, AverageConfig, StopRule,
};
use pdmp::{RngSpec, State};

use crate::artifacts::{out_path, write_json};
use crate::commands::{load_neuron_model, CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize, Clone)]
pub struct IdentityRow {
    pub identity: String,
    pub function: String,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub se: f64,
    pub tolerance: f64,
    pub verdict: String,
}

impl IdentityRow {
    fn passed(&self) -> bool {
        self.verdict == "pass"
    }
}

#[derive(Serialize)]
struct IdentityReport {
    config_hash: String,
    model: String,
    samples: usize,
    horizon: f64,
    rows: Vec<IdentityRow>,
    all_pass: bool,
}

fn verdict(ok: bool) -> String {
    if ok { "pass" } else { "fail" }.into()
}

/// Region parameters with model-derived defaults: `d` just above the margin
/// `(k+2) A B` when shifts are present, else a fixed fraction of the drift
/// scale.
pub fn default_region(
    spec: &NonInteractingSpec,
    d: Option<f64>,
    k: Option<usize>,
    big_a: Option<f64>,
) -> Result<(RegionSpec, f64, f64), ConfigError> {
    let k = k.unwrap_or(0);
    let a = big_a.unwrap_or_else(|| spec.pair_deriv_sup());
    let b = spec.drift_deriv_bound();
    let d = d.unwrap_or_else(|| {
        if a > 0.0 {
            1.05 * (k + 2) as f64 * a * b
        } else {
            0.3 * spec.drift(0.0).abs()
        }
    });
    let region = RegionSpec::new(d, k, a, {
        let s = spec.clone();
        std::sync::Arc::new(move |v| s.drift(v))
    })
    .map_err(|e| ConfigError(e.to_string()))?;

    // Place a test bump inside the region, between the excluded origin ball
    // and the equilibrium: works for drifts decreasing towards a positive
    // target (the neuron family).
    let lower_excl = (k + 2) as f64 * a;
    let target = spec
        .linear_drift()
        .map(|ld| ld.target)
        .ok_or_else(|| ConfigError("identity suite needs a linear-drift model".into()))?;
    let lo = (lower_excl * 1.05).max(0.04 * target);
    let hi = target - 1.05 * d / b;
    // Negated form also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(hi > lo + 0.05 * target) {
        return Err(ConfigError(format!(
            "region (d = {d}, k = {k}, A = {a}) leaves no room for a test bump in (0, {target})"
        )));
    }
    Ok((region, lo, hi))
}

pub struct IdentitySuite {
    pub rows: Vec<IdentityRow>,
    pub measure_len: usize,
}

/// Run every identity check on a neuron model: the jump-chain relation,
/// stationarity residuals of the generator, the representation formula, the
/// one-level integration by parts and (in dimension one) the derivative
/// bound.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    params: &NeuronParams,
    model: &ModelSpec,
    cfg: &RunConfig,
    region_d: Option<f64>,
    region_k: Option<usize>,
    region_a: Option<f64>,
    rep_samples: usize,
) -> Result<IdentitySuite, ConfigError> {
    let integ = &cfg.integrator;
    let avg = AverageConfig {
        batches: cfg.simulation.batches,
        ..Default::default()
    };
    let x0 = State::zeros(model.dim());

    // One long path for the time/jump-chain averages.
    let path = simulate_path(
        model,
        &x0,
        StopRule::horizon(cfg.simulation.horizon),
        RngSpec::new(cfg.seeds.seed, 0),
        integ,
    )
    .map_err(|e| ConfigError(format!("simulate: {e}")))?;

    let suite = test_suite(model.dim());
    let mut rows = Vec::new();

    for g in &suite {
        let check = jump_chain_identity(model, &path, g, integ, &avg)
            .map_err(|e| ConfigError(format!("jump-chain identity: {e}")))?;
        rows.push(IdentityRow {
            identity: "jump_chain".into(),
            function: g.name.clone(),
            lhs: check.lhs,
            rhs: check.rhs,
            residual: check.residual,
            se: check.residual_se,
            tolerance: 3.0 * check.residual_se,
            verdict: verdict(check.holds(3.0)),
        });
    }

    for g in &suite {
        let (mean, se) = stationarity_residual(model, &path, g, integ, &avg)
            .map_err(|e| ConfigError(format!("stationarity: {e}")))?;
        rows.push(IdentityRow {
            identity: "stationarity".into(),
            function: g.name.clone(),
            lhs: mean,
            rhs: 0.0,
            residual: mean,
            se,
            tolerance: 3.0 * se,
            verdict: verdict(mean.abs() <= 3.0 * se),
        });
    }

    // Invariant-measure samples for the integral identities.
    let mut sim = cfg.sim_config();
    let need_horizon = sim.burn_in + rep_samples as f64 * sim.stride / sim.paths as f64;
    sim.horizon = sim.horizon.max(need_horizon);
    let full = estimate_invariant(model, &x0, &sim, integ)
        .map_err(|e| ConfigError(format!("estimate invariant: {e}")))?;
    let measure = truncate_measure(&full, rep_samples);

    let rep_one = representation_rhs(model, &measure, &|_| 1.0, integ)
        .map_err(|e| ConfigError(format!("representation: {e}")))?;
    if rep_one.truncation_capped > 0 {
        eprintln!(
            "warning: {} of {} representation integrals hit max_time = {} before \
             the survival dropped below trunc_eps; results carry a truncation bias",
            rep_one.truncation_capped,
            measure.len(),
            integ.max_time
        );
    }
    let tol_one = (3.0 * rep_one.std_error).max(0.01);
    rows.push(IdentityRow {
        identity: "representation".into(),
        function: "one".into(),
        lhs: 1.0,
        rhs: rep_one.value,
        residual: rep_one.value - 1.0,
        se: rep_one.std_error,
        tolerance: tol_one,
        verdict: verdict((rep_one.value - 1.0).abs() <= tol_one),
    });

    let rep_sin = representation_check(model, &measure, &|x: &State| x[0].sin(), integ)
        .map_err(|e| ConfigError(format!("representation: {e}")))?;
    rows.push(IdentityRow {
        identity: "representation".into(),
        function: "sin_x1".into(),
        lhs: rep_sin.lhs,
        rhs: rep_sin.rhs,
        residual: rep_sin.residual,
        se: rep_sin.residual_se,
        tolerance: 3.0 * rep_sin.residual_se,
        verdict: verdict(rep_sin.holds(3.0)),
    });

    // Integration by parts on the first marginal.
    let spec = params
        .non_interacting_spec()
        .map_err(|e| ConfigError(e.to_string()))?;
    let (region, lo, hi) = default_region(&spec, region_d, region_k, region_a)?;
    let g = IppFunction::sin4_bump(lo, hi);
    let h = &test_suite(model.dim())[0];
    let ipp = ipp_check(&spec, model, h, &g, &measure, &region, integ)
        .map_err(|e| ConfigError(format!("integration by parts: {e}")))?;
    rows.push(IdentityRow {
        identity: "ipp".into(),
        function: g.name.clone(),
        lhs: ipp.lhs,
        rhs: ipp.rhs_flow - ipp.rhs_jump,
        residual: ipp.residual,
        se: ipp.residual_se,
        tolerance: 3.0 * ipp.residual_se + ipp.quadrature_residual,
        verdict: verdict(ipp.holds(3.0)),
    });

    if model.dim() == 1 {
        let width = hi - lo;
        for (blo, bhi) in [
            (lo, hi),
            (lo + 0.2 * width, hi - 0.2 * width),
            (lo + 0.35 * width, hi - 0.1 * width),
        ] {
            let g = IppFunction::sin4_bump(blo, bhi);
            let bound = derivative_bound_check(&spec, &measure, &g)
                .map_err(|e| ConfigError(format!("derivative bound: {e}")))?;
            rows.push(IdentityRow {
                identity: "derivative_bound".into(),
                function: g.name.clone(),
                lhs: bound.lhs,
                rhs: bound.bound,
                residual: bound.lhs - bound.bound,
                se: bound.lhs_se,
                tolerance: bound.bound,
                verdict: verdict(bound.holds),
            });
        }
    }

    Ok(IdentitySuite {
        rows,
        measure_len: measure.len(),
    })
}

fn truncate_measure(m: &EmpiricalMeasure, cap: usize) -> EmpiricalMeasure {
    if m.len() <= cap {
        return m.clone();
    }
    EmpiricalMeasure::new(
        m.samples()[..cap].to_vec(),
        m.provenance,
        m.seed,
        m.config_hash.clone(),
    )
    .expect("nonempty truncation")
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &RunConfig,
    region_d: Option<f64>,
    region_k: Option<usize>,
    region_a: Option<f64>,
    rep_samples: usize,
) -> CmdResult {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| ConfigError("verify-identities needs --model".into()))?;
    let (params, model) = load_neuron_model(model_path)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| "out".into());

    let suite = run_suite(
        &params,
        &model,
        cfg,
        region_d,
        region_k,
        region_a,
        rep_samples,
    )?;
    let all_pass = suite.rows.iter().all(|r| r.passed());

    let report = IdentityReport {
        config_hash: cfg.hash(),
        model: model_path.display().to_string(),
        samples: suite.measure_len,
        horizon: cfg.simulation.horizon,
        rows: suite.rows.clone(),
        all_pass,
    };
    write_json(&out_path(&out_dir, "identities.json"), &report).map_err(ConfigError)?;

    for row in &suite.rows {
        println!(
            "{:<18} {:<14} residual {:+.3e} (tol {:.3e}) {}",
            row.identity, row.function, row.residual, row.tolerance, row.verdict
        );
    }
    Ok(all_pass)
}
