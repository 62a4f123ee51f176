//! JSON configuration of each subcommand.

use std::path::{Path, PathBuf};

use prerank::model::{Architecture, CovarianceKind};
use prerank::preranks::PreRank;
use prerank::scenarios::{ExpCovSpec, Misspecification};
use prerank::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{resolve_path, DataSpec, SplitName};
use crate::output::RunManifest;
use crate::CliError;

fn d_levels() -> usize {
    100
}
fn d_context() -> usize {
    2000
}
fn d_sim_null() -> usize {
    5000
}
fn d_eval_null() -> usize {
    1000
}
fn d_hidden() -> Vec<usize> {
    vec![100, 100, 100]
}
fn d_components() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub truth: ExpCovSpec,
    #[serde(default)]
    pub misspec: Misspecification,
    pub cases: usize,
    pub ensemble: usize,
    pub preranks: Vec<PreRank>,
    #[serde(default = "d_context")]
    pub context_samples: usize,
    #[serde(default = "d_levels")]
    pub grid_levels: usize,
    #[serde(default = "d_sim_null")]
    pub null_replicates: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Network shape; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_components")]
    pub components: usize,
    #[serde(default)]
    pub covariance: CovarianceKind,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: d_hidden(),
            components: d_components(),
            covariance: CovarianceKind::Full,
        }
    }
}

impl ModelSpec {
    pub fn architecture(&self, input_dim: usize, output_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            output_dim,
            hidden: self.hidden.clone(),
            components: self.components,
            covariance: self.covariance,
        }
    }
}

/// Configuration shared by `train` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    pub training: TrainConfig,
    /// Train one model per λ and keep the one chosen on validation data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
    /// Checkpoint to score (`evaluate` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Split to score (`evaluate` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
    /// Null replicates behind the evaluation gates.
    #[serde(default = "d_eval_null")]
    pub null_replicates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NullConfig {
    pub n: usize,
    #[serde(default = "d_levels")]
    pub grid_levels: usize,
    #[serde(default = "d_sim_null")]
    pub replicates: usize,
    /// Ensemble size `M` of the hard PITs being gated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discretization: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

/// A config file after manifest unwrapping.
pub struct Loaded<T> {
    pub config: T,
    /// Seed recorded in a replayed manifest.
    pub manifest_seed: Option<u64>,
    /// Directory of the config file, for relative paths.
    pub base: Option<PathBuf>,
}

/// Reads a config or a manifest written by one of `accepted` commands.
pub fn load<T: DeserializeOwned>(path: &Path, accepted: &[&str]) -> Result<Loaded<T>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let (value, manifest_seed) = match RunManifest::detect(&value) {
        Some(m) => {
            if !accepted.contains(&m.command.as_str()) {
                return Err(CliError::Config(format!(
                    "manifest was written by `{}`, expected one of {accepted:?}",
                    m.command
                )));
            }
            (m.config, Some(m.seed))
        }
        None => (value, None),
    };
    let config = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Loaded {
        config,
        manifest_seed,
        base: path.parent().map(Path::to_path_buf),
    })
}

impl RunConfig {
    /// Makes file paths absolute relative to `base`.
    pub fn resolve_paths(&mut self, base: Option<&Path>) {
        self.data.path = resolve_path(base, &self.data.path);
        if let Some(c) = &self.checkpoint {
            self.checkpoint = Some(resolve_path(base, c));
        }
    }
}
