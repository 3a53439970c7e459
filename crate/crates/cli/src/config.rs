use std::path::{Path, PathBuf};

use livekt::baselines::LrParams;
use livekt::gbdt::GbdtParams;
use serde::Deserialize;

/// Experiment manifest read from TOML; every field can be overridden by a flag.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: Option<PathBuf>,
    pub models: Option<Vec<String>>,
    #[serde(rename = "T")]
    pub horizons: Option<Vec<usize>>,
    pub split_ratio: Option<f64>,
    pub split_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub emit: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub warm_start: Option<bool>,
    #[serde(default)]
    pub lr: LrOverrides,
    #[serde(default)]
    pub gbdt: GbdtOverrides,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrOverrides {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub l2: Option<f64>,
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdtOverrides {
    pub n_trees: Option<usize>,
    pub max_depth: Option<usize>,
    pub learning_rate: Option<f64>,
    pub min_samples_leaf: Option<usize>,
    pub lambda_l2: Option<f64>,
    pub max_bins: Option<usize>,
}

impl LrOverrides {
    pub fn apply(&self, mut p: LrParams) -> LrParams {
        if let Some(v) = self.learning_rate {
            p.learning_rate = v;
        }
        if let Some(v) = self.epochs {
            p.epochs = v;
        }
        if let Some(v) = self.l2 {
            p.l2 = v;
        }
        if let Some(v) = self.dim {
            p.dim = v;
        }
        p
    }
}

impl GbdtOverrides {
    pub fn apply(&self, mut p: GbdtParams) -> GbdtParams {
        if let Some(v) = self.n_trees {
            p.n_trees = v;
        }
        if let Some(v) = self.max_depth {
            p.max_depth = v;
        }
        if let Some(v) = self.learning_rate {
            p.learning_rate = v;
        }
        if let Some(v) = self.min_samples_leaf {
            p.min_samples_leaf = v;
        }
        if let Some(v) = self.lambda_l2 {
            p.lambda_l2 = v;
        }
        if let Some(v) = self.max_bins {
            p.max_bins = v;
        }
        p
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))
    }
}
