//! Experiment configuration: flat JSON file, one per experiment, with a
//! content hash embedded in outputs so runs can be traced to configs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CfaugError, Result};
use crate::loss::LossConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub correlation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            image_size: 32,
            train_per_class: 1000,
            val_per_class: 200,
            test_per_class: 500,
            correlation: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs at which lr is multiplied by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 64,
            lr_decay_epochs: vec![15, 25],
            lr_decay_factor: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model_name: String,
    /// When set, the dataset is loaded from this directory instead of
    /// being generated from `synth`.
    pub dataset_dir: Option<String>,
    pub synth: SynthConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Early stopping patience in epochs on validation accuracy.
    pub early_stopping_patience: usize,
    pub seeds: Vec<u64>,
    /// Fraction (or, for synthetic data, multiple) of training data used.
    pub data_ratio: f64,
    pub output_dir: String,
    /// Evaluation split names: original, mixed-same, mixed-rand,
    /// mixed-next, flip.
    pub eval_splits: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_name: "baseline".into(),
            dataset_dir: None,
            synth: SynthConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            early_stopping_patience: 8,
            seeds: vec![0, 1, 2],
            data_ratio: 1.0,
            output_dir: "runs".into(),
            eval_splits: vec![
                "original".into(),
                "mixed-same".into(),
                "mixed-rand".into(),
                "mixed-next".into(),
                "flip".into(),
            ],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.optimizer.epochs == 0 {
            return Err(CfaugError::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.optimizer.batch_size == 0 {
            return Err(CfaugError::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CfaugError::InvalidArgument("need at least one seed".into()));
        }
        if self.data_ratio <= 0.0 {
            return Err(CfaugError::InvalidArgument("data_ratio must be > 0".into()));
        }
        if self.data_ratio > 1.0 && self.dataset_dir.is_some() {
            return Err(CfaugError::InvalidArgument(
                "data_ratio > 1 is only supported for synthetic data".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: Self = serde_json::from_slice(bytes)
            .map_err(|e| CfaugError::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    /// Content hash over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex_prefix(&digest, 12)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}
