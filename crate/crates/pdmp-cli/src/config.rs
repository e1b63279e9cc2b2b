//! Run configuration: one self-describing JSON document, overridable field
//! by field from the command line. Every artifact embeds the SHA-256 of the
//! resolved configuration for provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

use pdmp::density::SimConfig;
use pdmp::IntegratorConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model description file (JSON). Only the neuron family is
    /// file-representable; custom models are registered programmatically.
    pub model: Option<PathBuf>,
    pub integrator: IntegratorConfig,
    pub simulation: SimSection,
    pub seeds: SeedSection,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub horizon: f64,
    /// Optional jump budget (stops at whichever of horizon/jumps comes
    /// first).
    pub jumps: Option<usize>,
    pub burn_in: f64,
    pub stride: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub seed: u64,
    pub paths: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            horizon: 2e4,
            jumps: None,
            burn_in: 100.0,
            stride: 1.0,
            batches: 30,
        }
    }
}

impl Default for SeedSection {
    fn default() -> Self {
        SeedSection { seed: 0, paths: 1 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config parse error: {e}"))
    }

    /// Canonical hash of the resolved configuration (sorted JSON keys). The
    /// output directory is excluded: where artifacts land does not change
    /// what they contain.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.out = None;
        let value = serde_json::to_value(&hashed).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical json");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            horizon: self.simulation.horizon,
            burn_in: self.simulation.burn_in,
            stride: self.simulation.stride,
            seed: self.seeds.seed,
            paths: self.seeds.paths,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_hash_stable() {
        let cfg = RunConfig {
            model: Some(PathBuf::from("model.json")),
            integrator: IntegratorConfig {
                step: 5e-4,
                max_time: 42.0,
                trunc_eps: 1e-9,
                use_closed_form: false,
            },
            simulation: SimSection {
                horizon: 123.0,
                jumps: Some(7),
                burn_in: 1.5,
                stride: 0.25,
                batches: 12,
            },
            seeds: SeedSection { seed: 9, paths: 3 },
            out: None,
        };
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(json, serde_json::to_string_pretty(&back).unwrap());
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"typo": 1}"#);
        assert!(err.is_err());
    }
}
