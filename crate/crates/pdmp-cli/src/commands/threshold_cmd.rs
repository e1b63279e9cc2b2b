//! `threshold`: the regularity-threshold arithmetic.

use serde::Serialize;

use pdmp::density::regularity_threshold;

use crate::artifacts::{out_path, write_json};
use crate::commands::{CmdResult, ConfigError};
use crate::config::RunConfig;

#[derive(Serialize)]
struct ThresholdOut {
    n: u32,
    f0: f64,
    b: f64,
    k_star: i64,
    guaranteed: bool,
    note: String,
}

pub fn run(cfg: &RunConfig, n: u32, f0: f64, b: f64) -> CmdResult {
    let t = regularity_threshold(n, f0, b).map_err(|e| ConfigError(e.to_string()))?;
    let note = if t.guaranteed {
        format!(
            "invariant density at least C^{} away from equilibria and 0",
            t.k_star
        )
    } else {
        "no differentiability guarantee at these parameters".into()
    };
    println!("k* = {} (guaranteed: {}) - {note}", t.k_star, t.guaranteed);
    if let Some(dir) = &cfg.out {
        let out = ThresholdOut {
            n,
            f0,
            b,
            k_star: t.k_star,
            guaranteed: t.guaranteed,
            note,
        };
        write_json(&out_path(dir, "threshold.json"), &out).map_err(ConfigError)?;
    }
    Ok(true)
}
