//! The JSON configuration file: schema-validated (unknown keys rejected),
//! defaults mirroring the per-module defaults.

use crate::field::{EncodingMode, ModelDims};
use crate::losses::LossWeights;
use crate::render::RenderConfig;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceConfig {
    pub coarse_res: usize,
    pub fine_res: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            coarse_res: 64,
            fine_res: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// F-score threshold in scene units.
    pub fscore_threshold: f64,
    /// Surface samples drawn from meshes before point metrics.
    pub mesh_samples: usize,
    /// Dense grid resolution for the oracle surface reconstruction.
    pub oracle_res: usize,
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fscore_threshold: 0.05,
            mesh_samples: 100_000,
            oracle_res: 192,
            sample_seed: 0,
        }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub render: RenderConfig,
    pub model: ModelDims,
    pub encoding_mode: EncodingMode,
    pub surface: SurfaceConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Schema(e.to_string()))
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        crate::train::config_hash(&self.canonical_json())
    }
}
