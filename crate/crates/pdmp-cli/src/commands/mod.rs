//! Subcommand implementations. Each returns `Ok(true)` when every check
//! passed, `Ok(false)` when a check failed (reports are still written), and
//! `Err` for configuration problems.

pub mod demo;
pub mod density_cmd;
pub mod goodness;
pub mod identities;
pub mod propagate;
pub mod simulate_cmd;
pub mod threshold_cmd;

use std::path::Path;

use pdmp::model::{build_neuron_model, ModelFile, ModelSpec, NeuronParams};

/// Configuration-level failure: exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub type CmdResult = Result<bool, ConfigError>;

pub fn load_neuron_model(path: &Path) -> Result<(NeuronParams, ModelSpec), ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read model file {}: {e}", path.display())))?;
    let file = ModelFile::from_json(&text).map_err(|e| ConfigError(e.to_string()))?;
    let params = file.neuron_params();
    let model = build_neuron_model(&params).map_err(|e| ConfigError(format!("model: {e}")))?;
    Ok((params, model))
}

pub fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>, ConfigError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| ConfigError(format!("bad {what} entry {s:?}: {e}")))
        })
        .collect()
}

/// Particle indices are 1-based on the command line and in all artifacts.
pub fn parse_indices(text: &str, dim: usize) -> Result<Vec<usize>, ConfigError> {
    text.split(',')
        .map(|s| {
            let v: usize = s
                .trim()
                .parse()
                .map_err(|e| ConfigError(format!("bad index {s:?}: {e}")))?;
            if v == 0 || v > dim {
                return Err(ConfigError(format!(
                    "index {v} outside 1..={dim} (indices are 1-based)"
                )));
            }
            Ok(v - 1)
        })
        .collect()
}
