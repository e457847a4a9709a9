//! Experiment configuration files: sectioned `key = value` text (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{AblationFlags, RunSettings, Variant};
use crate::model::NetworkConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub variants: Vec<Variant>,
    /// Train : test split of each source.
    pub test_split: [usize; 2],
    /// Stage-1 : stage-2 split of the source training data.
    pub stage_split: [usize; 2],
    pub adapt_samples: usize,
    pub adapt_batches: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("results"),
            variants: Variant::default_set(2),
            test_split: [4, 1],
            stage_split: [4, 1],
            adapt_samples: 100,
            adapt_batches: 100,
        }
    }
}

/// `[train]` as written in files; `clip_norm = 0` turns clipping off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_batches: usize,
    pub stage2_batches: usize,
    pub freeze_backbones_stage2: bool,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            stage1_batches: t.stage1_batches,
            stage2_batches: t.stage2_batches,
            freeze_backbones_stage2: t.freeze_backbones_stage2,
            clip_norm: t.clip_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub network: NetworkSection,
    pub train: TrainSection,
    pub ablation: AblationFlags,
}

/// `[network]`; every key optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub input_dim: usize,
    pub feature_layer_sizes: Vec<usize>,
    pub mff_start_layer: usize,
    pub group_count: usize,
    pub overlap: f64,
    pub output_components: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        Self {
            input_dim: n.input_dim,
            feature_layer_sizes: n.feature_layer_sizes,
            mff_start_layer: n.mff_start_layer,
            group_count: n.group_count,
            overlap: n.overlap,
            output_components: n.output_components,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn network(&self) -> NetworkConfig {
        let n = &self.network;
        NetworkConfig {
            input_dim: n.input_dim,
            feature_layer_sizes: n.feature_layer_sizes.clone(),
            mff_start_layer: n.mff_start_layer,
            group_count: n.group_count,
            overlap: n.overlap,
            output_components: n.output_components,
        }
    }

    /// Training settings for one seed.
    pub fn train(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            stage1_batches: t.stage1_batches,
            stage2_batches: t.stage2_batches,
            seed,
            freeze_backbones_stage2: t.freeze_backbones_stage2,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
        }
    }

    pub fn run_settings(&self) -> RunSettings {
        let e = &self.experiment;
        RunSettings {
            network: self.network(),
            train: self.train(0),
            ablation: self.ablation,
            variants: e.variants.clone(),
            test_fraction: (e.test_split[0], e.test_split[1]),
            stage_ratio: (e.stage_split[0], e.stage_split[1]),
            adapt_samples: e.adapt_samples,
            adapt_batches: e.adapt_batches,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        if e.variants.is_empty() {
            return Err(Error::Config("experiment.variants must not be empty".into()));
        }
        let out_dim = self.network.output_components;
        if let Some(Variant::Single(n)) = e.variants.iter().find(|v| matches!(v, Variant::Single(n) if *n >= 2)) {
            return Err(Error::Config(format!(
                "experiment.variants: single_{n} refers to a missing source (the benchmark has 2)"
            )));
        }
        if self.network.input_dim != 2 || out_dim != 2 {
            return Err(Error::Config(
                "network.input_dim and network.output_components must be 2 for the default benchmark".into(),
            ));
        }
        for (key, [a, b]) in [("test_split", e.test_split), ("stage_split", e.stage_split)] {
            if a == 0 || b == 0 {
                return Err(Error::Config(format!("experiment.{key} components must be positive")));
            }
        }
        if self.train.clip_norm < 0.0 {
            return Err(Error::Config("train.clip_norm must be >= 0".into()));
        }
        self.network().validate()?;
        self.train(0).validate()?;
        self.ablation.validate()
    }
}
