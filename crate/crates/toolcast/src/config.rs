//! Run configuration: a TOML file with one table per stage.
//!
//! ```toml
//! [scene]    # synthetic generator
//! [net]      # forecaster architecture
//! [loss]     # objective weights
//! [optim]    # AdamW and schedule
//! [eval]     # thresholds, horizons, baseline seed
//! [windows]  # window strides
//! [train]    # anatomy flag
//! [paths]    # dataset and run directory
//! ```
//!
//! Every key is optional. Values resolve as defaults, then the file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toolcast_core::dataio::{EVAL_STRIDE, TRAIN_STRIDE};
use toolcast_core::eval::EvalConfig;
use toolcast_core::net::NetConfig;
use toolcast_core::synth::SceneConfig;
use toolcast_core::train::{LossConfig, OptimConfig};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub train_stride: usize,
    pub eval_stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            train_stride: TRAIN_STRIDE,
            eval_stride: EVAL_STRIDE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    /// Feed anatomy rows to the model; false trains an instrument-only model.
    pub use_anatomy: bool,
    /// Keep a numbered checkpoint every this many epochs; 0 keeps only the
    /// latest and the final model.
    pub keep_every: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            use_anatomy: true,
            keep_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub dataset: PathBuf,
    /// Receives run.toml, manifest.json, reports and checkpoints.
    pub run_dir: PathBuf,
    /// Model checkpoints read by evaluate, ablate and forecast.
    pub checkpoints: Vec<PathBuf>,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            dataset: PathBuf::from("dataset"),
            run_dir: PathBuf::from("run"),
            checkpoints: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub windows: WindowConfig,
    pub train: TrainOptions,
    pub paths: PathConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Whether the TOML text sets `key` in table `section`.
    pub fn sets_key(text: &str, section: &str, key: &str) -> bool {
        toml::from_str::<toml::Table>(text)
            .ok()
            .and_then(|t| t.get(section).and_then(|o| o.as_table()).map(|o| o.contains_key(key)))
            .unwrap_or(false)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let tag = |section: &'static str| move |e: toolcast_core::Error| Error::Config(format!("[{section}] {e}"));
        self.scene.validate().map_err(tag("scene"))?;
        self.net.validate().map_err(tag("net"))?;
        self.loss.validate().map_err(tag("loss"))?;
        self.optim.validate().map_err(tag("optim"))?;
        self.eval.validate().map_err(tag("eval"))?;
        if self.windows.train_stride == 0 || self.windows.eval_stride == 0 {
            return Err(Error::Config("[windows] strides must be positive".into()));
        }
        Ok(())
    }
}
