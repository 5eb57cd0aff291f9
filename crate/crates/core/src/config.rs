//! Pipeline configuration, read from JSON. Every field has a default, so an
//! empty object `{}` is a valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Averaging;
use crate::predicate_recognition::FusionMode;
use crate::proposing::ProposingConfig;
use crate::training::TrainConfig;

/// Environment variable naming a config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "RELLOC_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrmConfig {
    pub hidden: usize,
    pub thresh_high: f64,
    pub thresh_low: f64,
    /// Majority class is downsampled to at most this many times the minority.
    pub neg_ratio: f64,
    pub train: TrainConfig,
}

impl Default for OrmConfig {
    fn default() -> Self {
        OrmConfig {
            hidden: 256,
            thresh_high: 0.5,
            thresh_low: 0.3,
            neg_ratio: 3.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrmConfig {
    pub fused_dim: usize,
    pub fusion: FusionMode,
    pub use_ggnn: bool,
    pub ggnn_hidden: usize,
    pub ggnn_steps: usize,
    pub train: TrainConfig,
}

impl Default for PrmConfig {
    fn default() -> Self {
        PrmConfig {
            fused_dim: 128,
            fusion: FusionMode::Product,
            use_ggnn: true,
            ggnn_hidden: 16,
            ggnn_steps: 3,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    pub resolution: usize,
    pub mse_thresh: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            resolution: 32,
            mse_thresh: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            averaging: Averaging::Micro,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub orm: OrmConfig,
    pub prm: PrmConfig,
    pub anchors: AnchorConfig,
    pub proposing: ProposingConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let o = &self.orm;
        if o.hidden == 0 {
            return Err(Error::Config("orm.hidden must be positive".into()));
        }
        if !(0.0 <= o.thresh_low && o.thresh_low < o.thresh_high && o.thresh_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= orm.thresh_low < orm.thresh_high <= 1, got {} and {}",
                o.thresh_low, o.thresh_high
            )));
        }
        if !(o.neg_ratio >= 1.0) {
            return Err(Error::Config(format!("orm.neg_ratio {} must be >= 1", o.neg_ratio)));
        }
        o.train.validate()?;
        let p = &self.prm;
        if p.fused_dim == 0 {
            return Err(Error::Config("prm.fused_dim must be positive".into()));
        }
        if p.use_ggnn && (p.ggnn_hidden == 0 || p.ggnn_steps == 0) {
            return Err(Error::Config("prm.ggnn_hidden and prm.ggnn_steps must be positive".into()));
        }
        p.train.validate()?;
        if self.anchors.resolution < 2 {
            return Err(Error::Config("anchors.resolution must be at least 2".into()));
        }
        if !(self.anchors.mse_thresh > 0.0) {
            return Err(Error::Config("anchors.mse_thresh must be positive".into()));
        }
        self.proposing.validate()?;
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return Err(Error::Config(format!("eval.iou_thresh {} outside (0, 1]", self.eval.iou_thresh)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Config::from_json(&text).map_err(|e| Error::parse(path, e.line(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `explicit`, else the file named by `RELLOC_CONFIG`, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => Config::load(&p),
            None => Ok(Config::default()),
        }
    }

    /// Overrides every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.orm.train.seed = seed;
        self.prm.train.seed = seed;
        self
    }
}
