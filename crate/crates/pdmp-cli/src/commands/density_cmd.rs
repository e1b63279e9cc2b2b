//! `estimate-density`: marginal histograms and kernel estimates of the
//! invariant measure, with a finite-difference smoothness probe on the
//! first marginal.

use serde::Serialize;

use pdmp::density::{estimate_invariant, smoothness_probe, GridDensity};
use pdmp::State;

use crate::artifacts::{out_path, write_json, CsvCell, CsvWriter};
use crate::commands::identities::default_region;
use crate::commands::{load_neuron_model, CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize)]
struct MarginalMeta {
    coordinate: usize,
    histogram_bins: usize,
    kde_bins: usize,
    kde_bandwidth: f64,
}

#[derive(Serialize)]
struct DensityReport {
    config_hash: String,
    samples: usize,
    marginals: Vec<MarginalMeta>,
    probe_region_d: f64,
    probe_region_k: usize,
    probe_region_a: f64,
    probe_margin_ok: bool,
    /// Suprema of FD derivatives of orders 1..=k on the first marginal KDE.
    probe_sups: Option<Vec<f64>>,
    probe_error: Option<String>,
}

fn write_grid(gd: &GridDensity, path: &std::path::Path) -> Result<(), String> {
    let mut csv = CsvWriter::new(&["grid_point", "value"]);
    for (x, v) in gd.grid_points().iter().zip(&gd.values) {
        csv.row(&[CsvCell::Float(*x), CsvCell::Float(*v)]);
    }
    csv.write(path)
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    cfg: &RunConfig,
    bins: Option<usize>,
    kde_bins: usize,
    region_d: Option<f64>,
    region_k: Option<usize>,
    region_a: Option<f64>,
    probe_order: usize,
) -> CmdResult {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| ConfigError("estimate-density needs --model".into()))?;
    let (params, model) = load_neuron_model(model_path)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| "out".into());

    let sim = cfg.sim_config();
    let measure = estimate_invariant(&model, &State::zeros(model.dim()), &sim, &cfg.integrator)
        .map_err(|e| ConfigError(format!("estimate invariant: {e}")))?;

    let mut marginals = Vec::new();
    let mut first_kde: Option<GridDensity> = None;
    for c in 0..model.dim() {
        let samples = measure.marginal_samples(c);
        let hist = GridDensity::histogram(&samples, bins)
            .map_err(|e| ConfigError(format!("histogram: {e}")))?;
        let kde = GridDensity::kde(&samples, kde_bins, None)
            .map_err(|e| ConfigError(format!("KDE: {e}")))?;
        write_grid(
            &hist,
            &out_path(&out_dir, &format!("marginal_hist_{}.csv", c + 1)),
        )
        .map_err(ConfigError)?;
        write_grid(
            &kde,
            &out_path(&out_dir, &format!("marginal_kde_{}.csv", c + 1)),
        )
        .map_err(ConfigError)?;
        marginals.push(MarginalMeta {
            coordinate: c + 1,
            histogram_bins: hist.bins,
            kde_bins: kde.bins,
            kde_bandwidth: kde.bandwidth.unwrap_or(f64::NAN),
        });
        if c == 0 {
            first_kde = Some(kde);
        }
    }

    let spec = params
        .non_interacting_spec()
        .map_err(|e| ConfigError(e.to_string()))?;
    let (region, _, _) = default_region(&spec, region_d, region_k, region_a)?;
    let (probe_sups, probe_error) =
        match smoothness_probe(first_kde.as_ref().expect("dim >= 1"), &region, probe_order) {
            Ok(sups) => (Some(sups), None),
            Err(e) => (None, Some(e.to_string())),
        };

    let report = DensityReport {
        config_hash: cfg.hash(),
        samples: measure.len(),
        marginals,
        probe_region_d: region.d,
        probe_region_k: region.k,
        probe_region_a: region.pair_deriv_sup,
        probe_margin_ok: region.margin_ok(spec.drift_deriv_bound()),
        probe_sups,
        probe_error,
    };
    write_json(&out_path(&out_dir, "density.json"), &report).map_err(ConfigError)?;
    println!(
        "estimate-density: {} samples, {} marginals written to {}",
        measure.len(),
        model.dim(),
        out_dir.display()
    );
    Ok(true)
}
