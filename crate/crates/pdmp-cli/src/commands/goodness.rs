//! `check-good`: certify a jump schedule by the smallest singular value of
//! its derivation matrix, sweeping starting points over a box.

use serde::Serialize;

use pdmp::skeleton::{goodness_sweep, JumpSchedule};

use crate::artifacts::{out_path, write_json, CsvCell, CsvWriter};
use crate::commands::{load_neuron_model, parse_f64_list, parse_indices, CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize)]
struct Certificate {
    config_hash: String,
    /// 1-based particle indices.
    indices: Vec<usize>,
    times: Vec<f64>,
    box_min: f64,
    box_max: f64,
    draws: usize,
    threshold: f64,
    worst_y: Vec<f64>,
    min_sv: f64,
    verdict: String,
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &RunConfig,
    indices_text: &str,
    times_text: Option<&str>,
    box_min: f64,
    box_max: f64,
    draws: usize,
    threshold: Option<f64>,
) -> CmdResult {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| ConfigError("check-good needs --model".into()))?;
    let (_, model) = load_neuron_model(model_path)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| "out".into());

    let indices = parse_indices(indices_text, model.dim())?;
    let times = match times_text {
        Some(t) => parse_f64_list(t, "times")?,
        // Without explicit waiting times, certify the zero-time criterion:
        // good there implies good for all small enough times.
        None => vec![0.0; indices.len()],
    };
    let sched = JumpSchedule::new(times, indices).map_err(|e| ConfigError(e.to_string()))?;

    let report = goodness_sweep(
        &model,
        &sched,
        box_min,
        box_max,
        draws,
        cfg.seeds.seed,
        threshold,
        &cfg.integrator,
    )
    .map_err(|e| ConfigError(format!("goodness sweep: {e}")))?;

    let dim = model.dim();
    let mut header: Vec<String> = (1..=dim).map(|c| format!("y_{c}")).collect();
    header.push("min_singular_value".into());
    header.push("det_gram".into());
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = CsvWriter::new(&header_refs);
    for row in &report.rows {
        let mut cells: Vec<CsvCell> = row.start.iter().map(|v| CsvCell::Float(*v)).collect();
        cells.push(CsvCell::Float(row.min_singular_value));
        cells.push(CsvCell::Float(row.det_gram));
        csv.row(&cells);
    }
    csv.write(&out_path(&out_dir, "sweep.csv"))
        .map_err(ConfigError)?;

    let cert = Certificate {
        config_hash: cfg.hash(),
        indices: report.indices.iter().map(|i| i + 1).collect(),
        times: report.times.clone(),
        box_min,
        box_max,
        draws: report.draws,
        threshold: report.threshold,
        worst_y: report.worst_start.clone(),
        min_sv: report.worst_min_singular_value,
        verdict: if report.all_good { "good" } else { "not_good" }.into(),
    };
    write_json(&out_path(&out_dir, "certificate.json"), &cert).map_err(ConfigError)?;

    println!(
        "check-good: worst min singular value {:.3e} over {} starts -> {}",
        report.worst_min_singular_value, report.draws, cert.verdict
    );
    Ok(report.all_good)
}
