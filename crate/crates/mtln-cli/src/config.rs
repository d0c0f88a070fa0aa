//! JSON run configuration. One document drives every subcommand; unknown
//! keys are rejected at every nesting level and each field has a default,
//! so an empty document `{}` is a complete valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mtln_core::data::derive_seed;
use mtln_core::loss::LossConfig;
use mtln_core::metrics::HausdorffMode;
use mtln_core::nn::NetworkConfig;
use mtln_core::train::{TaskMode, TrainConfig};

use crate::{CliError, Result};

/// Sub-stream tags under the run seed. Each consumer seeds its generator
/// from `derive_seed(run_seed, TAG)` so no two commands share draws; the
/// tags are far above any per-sample index, which derives directly from
/// the run seed.
pub const STREAM_SPLIT: u64 = 0x53_50_4c_49_54;
pub const STREAM_TRAIN: u64 = 0x54_52_41_49_4e;
pub const STREAM_NETWORK: u64 = 0x4e_45_54_57_4f_52_4b;

/// Hausdorff-distance variant selector, as spelled in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HdMode {
    Contour,
    Region,
}

impl From<HdMode> for HausdorffMode {
    fn from(m: HdMode) -> Self {
        match m {
            HdMode::Contour => HausdorffMode::Contour,
            HdMode::Region => HausdorffMode::Region,
        }
    }
}

/// Optimization hyperparameters. Loss and network shape live in their own
/// top-level sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: TaskMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            epochs: d.epochs,
            batch_size: d.batch_size,
            mode: d.mode,
        }
    }
}

/// Dataset parameters: phantom generation shape and evaluation options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Phantom bases `phantom` generates when `--count` is not given.
    pub count: usize,
    /// Phantom frame size in pixels; both must be at least 64.
    pub height: usize,
    pub width: usize,
    /// Pixel size assumed for raw inference images, which carry no
    /// annotations of their own.
    pub pixel_size_mm: f64,
    pub hd_mode: HdMode,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            count: 32,
            height: 64,
            width: 64,
            pixel_size_mm: 0.1,
            hd_mode: HdMode::Contour,
        }
    }
}

/// Artifact locations. Relative paths resolve against `--out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub metrics: PathBuf,
    pub predictions_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset: "dataset".into(),
            checkpoint: "checkpoint.mtln".into(),
            loss_log: "loss_log.csv".into(),
            metrics: "metrics.csv".into(),
            predictions_dir: "predictions".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; the `--seed` flag overrides it, and 0 is used when
    /// neither is given.
    pub seed: Option<u64>,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Reads a JSON config, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.height < 64 || self.data.width < 64 {
            return Err(CliError::Config(format!(
                "data.height and data.width must be at least 64, got {}x{}",
                self.data.height, self.data.width
            )));
        }
        if !(0.01..=1.0).contains(&self.data.pixel_size_mm) {
            return Err(CliError::Config(format!(
                "data.pixel_size_mm {} outside [0.01, 1.0]",
                self.data.pixel_size_mm
            )));
        }
        Ok(())
    }

    /// `--seed` flag, else the config's seed, else 0.
    pub fn effective_seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    /// Assembles the training configuration for one run seed. The shuffle
    /// and initialization streams derive from the run seed so that one
    /// `--seed` determines the whole run; `network.seed` offsets the
    /// initialization stream without touching anything else.
    pub fn train_config(&self, run_seed: u64) -> TrainConfig {
        let mut network = self.network.clone();
        network.seed = derive_seed(derive_seed(run_seed, STREAM_NETWORK), self.network.seed);
        TrainConfig {
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: derive_seed(run_seed, STREAM_TRAIN),
            mode: self.train.mode,
            loss: self.loss.clone(),
            network,
        }
    }

    pub fn split_seed(run_seed: u64) -> u64 {
        derive_seed(run_seed, STREAM_SPLIT)
    }

    pub fn phantom_seed(run_seed: u64, index: u64) -> u64 {
        derive_seed(run_seed, index)
    }
}
