//! `simulate`: trajectory CSVs plus a summary with seeded provenance and
//! ergodic averages of the standard observable suite.

use serde::Serialize;

use pdmp::simulate::{ergodic_average, simulate_path, test_suite, AverageConfig, StopRule};
use pdmp::{RngSpec, State};

use crate::artifacts::{out_path, write_json, CsvCell, CsvWriter};
use crate::commands::{load_neuron_model, parse_f64_list, CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize)]
struct AverageRow {
    function: String,
    mean: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct PathSummary {
    stream: u64,
    n_jumps: usize,
    final_time: f64,
    final_state: Vec<f64>,
    averages: Vec<AverageRow>,
}

#[derive(Serialize)]
struct SimulateSummary {
    config_hash: String,
    seed: u64,
    dimension: usize,
    horizon: f64,
    jumps: Option<usize>,
    paths: Vec<PathSummary>,
}

pub fn run(cfg: &RunConfig, x0_text: Option<&str>) -> CmdResult {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| ConfigError("simulate needs --model".into()))?;
    let (_, model) = load_neuron_model(model_path)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| "out".into());

    let x0 = match x0_text {
        Some(text) => {
            let coords = parse_f64_list(text, "x0")?;
            if coords.len() != model.dim() {
                return Err(ConfigError(format!(
                    "x0 has {} coordinates, model has {}",
                    coords.len(),
                    model.dim()
                )));
            }
            State::from_column_slice(&coords)
        }
        None => State::zeros(model.dim()),
    };

    let stop = StopRule {
        horizon: Some(cfg.simulation.horizon),
        max_jumps: cfg.simulation.jumps,
    };
    let avg = AverageConfig {
        batches: cfg.simulation.batches,
        ..Default::default()
    };
    let suite = test_suite(model.dim());

    // Paths are independent streams; simulate in parallel, write in order.
    use rayon::prelude::*;
    let simulated: Vec<Result<_, ConfigError>> = (0..cfg.seeds.paths)
        .into_par_iter()
        .map(|p| {
            let rng = RngSpec::new(cfg.seeds.seed, p as u64);
            simulate_path(&model, &x0, stop, rng, &cfg.integrator)
                .map_err(|e| ConfigError(format!("simulate: {e}")))
        })
        .collect();

    let mut paths = Vec::new();
    for (p, path) in simulated.into_iter().enumerate() {
        let path = path?;

        let mut header = vec!["k".to_string(), "T_k".to_string(), "I_k".to_string()];
        for c in 1..=model.dim() {
            header.push(format!("Z_k_{c}"));
        }
        for c in 1..=model.dim() {
            header.push(format!("X_k_{c}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = CsvWriter::new(&header_refs);
        for k in 0..path.n_jumps() {
            let mut row = vec![
                CsvCell::Int(k as i64 + 1),
                CsvCell::Float(path.jump_times[k]),
                CsvCell::Int(path.jump_indices[k] as i64 + 1),
            ];
            row.extend(path.pre_jump_states[k].iter().map(|v| CsvCell::Float(*v)));
            row.extend(path.post_jump_states[k].iter().map(|v| CsvCell::Float(*v)));
            csv.row(&row);
        }
        csv.write(&out_path(&out_dir, &format!("path_{p}.csv")))
            .map_err(ConfigError)?;

        let mut averages = Vec::new();
        if path.n_jumps() > 0 && path.final_time > 0.0 {
            for g in &suite {
                let (mean, se) =
                    ergodic_average(&model, &path, &|x| g.eval(x), &cfg.integrator, &avg)
                        .map_err(|e| ConfigError(format!("ergodic average: {e}")))?;
                averages.push(AverageRow {
                    function: g.name.clone(),
                    mean,
                    std_error: se,
                });
            }
        }
        paths.push(PathSummary {
            stream: p as u64,
            n_jumps: path.n_jumps(),
            final_time: path.final_time,
            final_state: path.final_state.iter().copied().collect(),
            averages,
        });
    }

    let summary = SimulateSummary {
        config_hash: cfg.hash(),
        seed: cfg.seeds.seed,
        dimension: model.dim(),
        horizon: cfg.simulation.horizon,
        jumps: cfg.simulation.jumps,
        paths,
    };
    write_json(&out_path(&out_dir, "summary.json"), &summary).map_err(ConfigError)?;
    println!(
        "simulate: {} path(s) written to {}",
        cfg.seeds.paths,
        out_dir.display()
    );
    Ok(true)
}
