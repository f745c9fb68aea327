//! Run configuration: built-in defaults, then a JSON file, then flags.

use std::path::{Path, PathBuf};

use anyhow::Context;
use lbsplat_core::train::{AdamConfig, DensityConfig, LearningRates};
use lbsplat_core::{AblationConfig, LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_OUTPUT: &str = "run";

/// Everything a training run needs. The config file uses this schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: Option<PathBuf>,
    /// Output directory, `run` when unset.
    pub output: Option<PathBuf>,
    pub iterations: u64,
    pub seed: u64,
    pub threads: Option<usize>,
    /// Leave wall-clock values out of every artifact.
    pub deterministic: bool,
    pub loss_weights: LossWeights,
    pub ablation: AblationConfig,
    pub learning_rates: LearningRates,
    pub density: DensityConfig,
    pub adam: AdamConfig,
    pub kernel_cutoff: Option<f64>,
    pub early_termination: bool,
    /// PSNR over mask pixels only in the final evaluation.
    pub eval_masked: bool,
    /// Also write `checkpoint_NNNNNN.ckpt` every this many iterations (0: never).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            scene: None,
            output: None,
            iterations: t.iterations,
            seed: 0,
            threads: None,
            deterministic: false,
            loss_weights: t.loss_weights,
            ablation: t.ablation,
            learning_rates: t.learning_rates,
            density: t.density,
            adam: t.adam,
            kernel_cutoff: t.kernel_cutoff,
            early_termination: t.early_termination,
            eval_masked: false,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`. Relative paths inside the file are taken
    /// relative to the file itself.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.scene, &mut cfg.output].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            loss_weights: self.loss_weights,
            ablation: self.ablation,
            learning_rates: self.learning_rates,
            density: self.density,
            adam: self.adam,
            kernel_cutoff: self.kernel_cutoff,
            early_termination: self.early_termination,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.scene.is_none() {
            return Err(CliError::Usage("no scene given (--scene or \"scene\" in the config file)".into()).into());
        }
        if self.threads == Some(0) {
            return Err(CliError::Usage("thread count must be at least 1".into()).into());
        }
        self.train_config().validate()?;
        Ok(())
    }
}
