//! Experiment configuration, training, evaluation and the ablation harness.

mod ablate;
mod data;
mod dataset;
mod eval;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceOptions;
use crate::model::{ModelConfig, Variant};
use crate::volume::AugmentConfig;

pub use ablate::{ablate, AblationRow, AblationTable, SeedResult, VariantSpec};
pub use data::{load_case, TrainingSet};
pub use dataset::{generate_dataset, DatasetConfig};
pub use eval::{eval_predictions, evaluate_model, infer_file, predict_manifest, prediction_path, EvalOutcome};
pub use train::{train, train_in_memory, EpochRecord, RunRecord};

/// Which of the three mechanisms are switched on, plus the width of the
/// single-branch decoder when the multi-branch decoder is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub md: bool,
    pub sab: bool,
    pub dcd: bool,
    pub width_multiplier: usize,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            md: true,
            sab: true,
            dcd: true,
            width_multiplier: 1,
        }
    }
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.sab && !self.md {
            return Err(Error::Config("the attention block requires the multi-branch decoder".into()));
        }
        if self.width_multiplier == 0 || (self.md && self.width_multiplier != 1) {
            return Err(Error::Config(format!(
                "width multiplier {} is only meaningful (and positive) for the single-branch decoder",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    /// `base` with the decoder variant, attention and width set from the flags.
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            variant: if self.md { Variant::MultiBranch } else { Variant::SingleBranch },
            use_sab: self.sab,
            width_multiplier: self.width_multiplier,
            ..base.clone()
        }
    }

    /// Short row label such as `MD+SAB+DCD` or `Baseline (3x)`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.md {
            parts.push("MD".to_string());
        } else if self.width_multiplier == 1 {
            parts.push("Baseline".to_string());
        } else {
            parts.push(format!("Baseline ({}x)", self.width_multiplier));
        }
        if self.sab {
            parts.push("SAB".into());
        }
        if self.dcd {
            parts.push("DCD".into());
        }
        parts.join("+")
    }
}

/// Optimiser schedule and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Training stacks drawn per epoch; every window once when absent.
    pub stacks_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr0: 0.001,
            lr_decay: 0.9,
            momentum: 0.9,
            batch_size: 4,
            stacks_per_epoch: Some(96),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.stacks_per_epoch == Some(0) {
            return bad("epochs, batch_size and stacks_per_epoch must be positive".into());
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        learning_rate(self.lr0, self.lr_decay, epoch)
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Everything a training run or ablation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset manifest; relative paths resolve against the config file.
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub inference: InferenceOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: PathBuf::from("data/manifest.toml"),
            out_dir: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
            model: ModelConfig::default(),
            ablation: Ablation::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            inference: InferenceOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.ablation.apply(&self.model).validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let [lo, hi] = self.augment.scale_range;
        if !(lo > 0.0 && lo <= hi) || self.augment.crop == 0 || self.augment.crop % crate::model::OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "augmentation needs 0 < scale_lo <= scale_hi and a crop that is a positive multiple of 16, got {:?} / {}",
                self.augment.scale_range, self.augment.crop
            )));
        }
        Ok(())
    }

    /// The model this config trains.
    pub fn model_config(&self) -> ModelConfig {
        self.ablation.apply(&self.model)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a TOML config; relative paths inside become relative to the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.manifest, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
