use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use smpca_core::{FitConfig, Method, SimConfig};

use crate::Failure;

/// File locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Observation CSV (`subject,curve,time,value`).
    pub observations: Option<PathBuf>,
    /// Latent truth CSV written by `simulate`.
    pub truth: Option<PathBuf>,
    /// Model artifact.
    pub model: Option<PathBuf>,
    /// Output CSV of `impute` and `forecast`.
    pub output: Option<PathBuf>,
}

/// Configuration file shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub method: Method,
    /// Grids, smoothing, selection (`K`, `K_max`, `ε`, `L_max`, `h_max`),
    /// solver tolerances and the VAR order cap.
    pub fit: FitConfig,
    /// Generator settings for `simulate`, including its seed.
    pub simulate: SimConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::SpectralMpca,
            fit: FitConfig::default(),
            simulate: SimConfig::default(),
            paths: Paths::default(),
        }
    }
}

pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serializes")
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}
