//! `neuron-demo`: end-to-end run on the interacting-neuron system — the
//! closed-form determinant of the derivation matrix, the full identity
//! suite, and the regularity threshold.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use pdmp::density::regularity_threshold;
use pdmp::model::{build_neuron_model, NeuronParams, RateKind, RateSpec};
use pdmp::skeleton::{derivation_matrix, neuron_det_sigma_closed_form, JumpSchedule};
use pdmp::State;

use crate::artifacts::{out_path, write_json};
use crate::commands::identities::{run_suite, IdentityRow};
use crate::commands::{CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize)]
struct DetSigmaReport {
    schedules: usize,
    worst_rel_err_exact: f64,
    worst_rel_err_rk4: f64,
    tol_exact: f64,
    tol_rk4: f64,
    pass: bool,
}

#[derive(Serialize)]
struct ThresholdReport {
    n: u32,
    f0: f64,
    b: f64,
    k_star: i64,
    guaranteed: bool,
}

#[derive(Serialize)]
struct DemoReport {
    config_hash: String,
    n: usize,
    lambda: f64,
    v_star: f64,
    weight: f64,
    det_sigma: DetSigmaReport,
    identities: Vec<IdentityRow>,
    threshold: ThresholdReport,
    all_pass: bool,
}

pub fn run(cfg: &RunConfig, n: usize, schedules: usize) -> CmdResult {
    if n < 2 {
        return Err(ConfigError("neuron-demo needs --n >= 2".into()));
    }
    let out_dir = cfg.out.clone().unwrap_or_else(|| "out".into());
    let lambda = 1.0;
    let v_star = 1.0;
    let weight = 0.2;
    let rates = RateSpec {
        kind: RateKind::Sigmoid {
            center: 0.8,
            slope: 2.0,
        },
        bound: 2.0,
        floor: 0.4,
    };
    let params = NeuronParams::uniform(n, lambda, v_star, weight, rates);
    let model = build_neuron_model(&params).map_err(|e| ConfigError(e.to_string()))?;

    // Determinant identity for the in-order schedule, exact flows and RK4.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.seed);
    let rk4_cfg = {
        let mut c = cfg.integrator;
        c.use_closed_form = false;
        c
    };
    let mut worst_exact: f64 = 0.0;
    let mut worst_rk4: f64 = 0.0;
    for _ in 0..schedules {
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let y = State::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let sched = JumpSchedule::new(times.clone(), (0..n).collect()).expect("valid schedule");
        let closed = neuron_det_sigma_closed_form(lambda, v_star, &times);

        let det = derivation_matrix(&model, &y, &sched, &cfg.integrator)
            .map_err(|e| ConfigError(format!("derivation matrix: {e}")))?
            .sigma
            .determinant();
        worst_exact = worst_exact.max(((det - closed) / closed).abs());

        let det_rk4 = derivation_matrix(&model, &y, &sched, &rk4_cfg)
            .map_err(|e| ConfigError(format!("derivation matrix (RK4): {e}")))?
            .sigma
            .determinant();
        worst_rk4 = worst_rk4.max(((det_rk4 - closed) / closed).abs());
    }
    let det_report = DetSigmaReport {
        schedules,
        worst_rel_err_exact: worst_exact,
        worst_rel_err_rk4: worst_rk4,
        tol_exact: 1e-6,
        tol_rk4: 1e-4,
        pass: worst_exact < 1e-6 && worst_rk4 < 1e-4,
    };
    println!(
        "det sigma: worst rel err {:.2e} (exact), {:.2e} (RK4) over {} schedules -> {}",
        worst_exact,
        worst_rk4,
        schedules,
        if det_report.pass { "pass" } else { "fail" }
    );

    let suite = run_suite(&params, &model, cfg, None, None, None, 10_000)?;
    for row in &suite.rows {
        println!(
            "{:<18} {:<14} residual {:+.3e} (tol {:.3e}) {}",
            row.identity, row.function, row.residual, row.tolerance, row.verdict
        );
    }

    let threshold = regularity_threshold(n as u32, params.rates.floor, lambda)
        .map_err(|e| ConfigError(e.to_string()))?;
    println!(
        "threshold: k* = {} (guaranteed: {})",
        threshold.k_star, threshold.guaranteed
    );

    let all_pass = det_report.pass && suite.rows.iter().all(|r| r.verdict == "pass");
    let report = DemoReport {
        config_hash: cfg.hash(),
        n,
        lambda,
        v_star,
        weight,
        det_sigma: det_report,
        identities: suite.rows,
        threshold: ThresholdReport {
            n: n as u32,
            f0: params.rates.floor,
            b: lambda,
            k_star: threshold.k_star,
            guaranteed: threshold.guaranteed,
        },
        all_pass,
    };
    write_json(&out_path(&out_dir, "neuron_demo.json"), &report).map_err(ConfigError)?;
    Ok(all_pass)
}
