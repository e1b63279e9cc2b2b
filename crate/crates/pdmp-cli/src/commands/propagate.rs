//! `propagate-density`: push a product-form density through one jump step,
//! writing per-particle density grids, the total-mass check and (for
//! constant rates and uniform weights) the closed-form comparison.

use serde::Serialize;

use pdmp::density::{coarea_closed_form, normalize_regeneration, CoareaOperator, ScalarDensity};
use pdmp::model::RateKind;
use pdmp::State;

use crate::artifacts::{out_path, write_json, CsvCell, CsvWriter};
use crate::commands::{load_neuron_model, CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize)]
struct PropagateReport {
    config_hash: String,
    support: (f64, f64),
    cells: usize,
    total_mass: f64,
    mass_tolerance: f64,
    mass_ok: bool,
    /// Closed-form comparison, present only for constant rates and uniform
    /// weights.
    closed_form_max_rel_err: Option<f64>,
    closed_form_ok: Option<bool>,
    all_ok: bool,
}

pub fn run(cfg: &RunConfig, support_lo: f64, support_hi: f64, cells: usize) -> CmdResult {
    let model_path = cfg
        .model
        .as_ref()
        .ok_or_else(|| ConfigError("propagate-density needs --model".into()))?;
    let (params, _) = load_neuron_model(model_path)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| "out".into());
    if params.n > 3 {
        return Err(ConfigError(
            "propagate-density writes full tensor grids; use N <= 3".into(),
        ));
    }

    let spec = params
        .non_interacting_spec()
        .map_err(|e| ConfigError(e.to_string()))?;
    let bump = ScalarDensity::smooth_bump(support_lo, support_hi, 1.0)
        .map_err(|e| ConfigError(e.to_string()))?;
    let r = normalize_regeneration(&spec, &bump).map_err(|e| ConfigError(e.to_string()))?;
    let op = CoareaOperator::new(&spec, r.clone()).map_err(|e| ConfigError(e.to_string()))?;

    // Closed form applies to constant rates with one shared weight.
    let uniform_weight = {
        let mut w = None;
        let mut uniform = true;
        for i in 0..params.n {
            for j in 0..params.n {
                if i != j {
                    match w {
                        None => w = Some(params.weights[i][j]),
                        Some(prev) if prev == params.weights[i][j] => {}
                        _ => uniform = false,
                    }
                }
            }
        }
        if uniform {
            w
        } else {
            None
        }
    };
    let const_rate = match params.rates.kind {
        RateKind::Constant { value } => Some(value),
        _ => None,
    };
    let closed_applicable = params.n >= 2 && const_rate.is_some() && uniform_weight.is_some();

    let mut max_rel_err: f64 = 0.0;
    let n = params.n;
    for i in 0..n {
        let axes = op
            .support_box(i, &cfg.integrator)
            .map_err(|e| ConfigError(e.to_string()))?;
        let widths: Vec<f64> = axes.iter().map(|(a, b)| (b - a) / cells as f64).collect();

        let mut header: Vec<String> = (1..=n).map(|c| format!("y_{c}")).collect();
        header.push(format!("q_{}", i + 1));
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let mut csv = CsvWriter::new(&header_refs);

        let mut idx = vec![0usize; n];
        'grid: loop {
            let y = State::from_fn(n, |c, _| axes[c].0 + (idx[c] as f64 + 0.5) * widths[c]);
            let q = op
                .q(i, &y, &cfg.integrator)
                .map_err(|e| ConfigError(format!("q_{}: {e}", i + 1)))?;
            let mut cells_row: Vec<CsvCell> = y.iter().map(|v| CsvCell::Float(*v)).collect();
            cells_row.push(CsvCell::Float(q));
            csv.row(&cells_row);

            if let (true, Some(f), Some(a)) = (closed_applicable, const_rate, uniform_weight) {
                let closed = coarea_closed_form(params.lambda, params.v_star, n, f, a, &r, i, &y);
                if closed > 1e-6 {
                    max_rel_err = max_rel_err.max(((q - closed) / closed).abs());
                }
            }

            let mut c = 0;
            loop {
                idx[c] += 1;
                if idx[c] < cells {
                    break;
                }
                idx[c] = 0;
                c += 1;
                if c == n {
                    break 'grid;
                }
            }
        }
        csv.write(&out_path(&out_dir, &format!("q_{}.csv", i + 1)))
            .map_err(ConfigError)?;
    }

    let total = op
        .total_mass(cells, &cfg.integrator)
        .map_err(|e| ConfigError(format!("total mass: {e}")))?;
    let mass_ok = (total - 1.0).abs() <= 1e-2;
    let (cf_err, cf_ok) = if closed_applicable {
        (Some(max_rel_err), Some(max_rel_err < 1e-3))
    } else {
        (None, None)
    };
    let all_ok = mass_ok && cf_ok.unwrap_or(true);

    let report = PropagateReport {
        config_hash: cfg.hash(),
        support: (support_lo, support_hi),
        cells,
        total_mass: total,
        mass_tolerance: 1e-2,
        mass_ok,
        closed_form_max_rel_err: cf_err,
        closed_form_ok: cf_ok,
        all_ok,
    };
    write_json(&out_path(&out_dir, "propagate.json"), &report).map_err(ConfigError)?;
    println!(
        "propagate-density: total mass {total:.4} (ok: {mass_ok}){}",
        match cf_err {
            Some(e) => format!(", closed-form max rel err {e:.2e}"),
            None => String::new(),
        }
    );
    Ok(all_ok)
}
