//! JSON run configuration.
//!
//! ```json
//! {
//!   "seed": 1,
//!   "dataset": "data.jsonl",
//!   "out": "run",
//!   "model": {"k": 300, "j": 400, "m": 1000, "d_e": 64, "d_w": 64, "d_h": 128, "vocab_size": 3000, "max_len": 30},
//!   "split": {"train": 0.65, "val": 0.25, "test": 0.10, "seed": 7},
//!   "seeding": {"learning_rate": 0.003, "epochs": 30, "weight_metric": "C"},
//!   "boosting": {"epochs": 20, "baseline": "b2", "num_samples": 5, "top_q": 3}
//! }
//! ```
//!
//! Only `seed` and `dataset` are required. Relative paths are taken from the
//! directory holding the config file. `model.vocab_size` caps the vocabulary
//! built from the training captions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelDims;
use crate::training::{BoostingConfig, SeedingConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<TrainError> for ConfigError {
    fn from(e: TrainError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Independent of the run seed so that runs with different seeds share one split.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.25,
            test: 0.10,
            seed: 7,
        }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub seeding: SeedingConfig,
    #[serde(default)]
    pub boosting: BoostingConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads, validates and resolves paths against the config's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.out = cfg.out.map(|o| base.join(o));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        for (name, v) in [
            ("k", m.k),
            ("j", m.j),
            ("m", m.m),
            ("d_e", m.d_e),
            ("d_w", m.d_w),
            ("d_h", m.d_h),
            ("max_len", m.max_len),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("model.{name} must be positive")));
            }
        }
        if m.vocab_size <= crate::text::NUM_RESERVED {
            return Err(ConfigError::Invalid(format!(
                "model.vocab_size {} leaves no room for words",
                m.vocab_size
            )));
        }
        let s = &self.split;
        if [s.train, s.val, s.test].iter().any(|r| !(0.0..=1.0).contains(r)) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "split ratios {:?} must lie in [0, 1] and sum to 1",
                s.ratios()
            )));
        }
        self.seeding.validate()?;
        self.boosting.validate()?;
        Ok(())
    }

    /// Output directory: the explicit one, else the config's `out`, else the working directory.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_owned)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }
}
