//! Experiment description read from `--config`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use specnet::clustering::PoolMode;
use specnet::data::{MatrixFormat, Task};
use specnet::graph::GraphMethod;
use specnet::nn::Architecture;
use specnet::train::{ProxyConfig, TrainConfig};
use specnet::{Error, Result};

fn default_format() -> MatrixFormat {
    MatrixFormat::Csv
}
fn default_fraction() -> f64 {
    0.1
}
fn default_knn() -> usize {
    7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub features: PathBuf,
    pub targets: PathBuf,
    #[serde(default = "default_format")]
    pub format: MatrixFormat,
    #[serde(default)]
    pub test_features: Option<PathBuf>,
    #[serde(default)]
    pub test_targets: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationStep {
    Log,
    Zscore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// One of rbf, rbf-local, supervised, supervised-lowrank, known.
    pub method: String,
    /// Global kernel width; the median heuristic when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_knn")]
    pub knn_k: usize,
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub known_path: Option<PathBuf>,
    #[serde(default)]
    pub proxy: ProxyConfig,
}

impl GraphConfig {
    pub fn method(&self) -> Result<GraphMethod> {
        self.method.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub normalization: Vec<NormalizationStep>,
    pub task: Task,
    pub graph: GraphConfig,
    /// Pooling strides of the cluster hierarchy, fine to coarse.
    #[serde(default)]
    pub strides: Vec<usize>,
    pub train: TrainConfig,
    #[serde(default = "default_fraction")]
    pub validation_fraction: f64,
}

impl RunConfig {
    /// Reads a config; relative data paths are resolved against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.features);
        fix(&mut self.data.targets);
        self.data.test_features.as_mut().map(fix);
        self.data.test_targets.as_mut().map(fix);
        self.graph.known_path.as_mut().map(fix);
    }

    /// One seed drives the split, the proxy, the hierarchy and the network.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.graph.proxy.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        let method = self.graph.method()?;
        match method {
            GraphMethod::SupervisedLowrank if self.graph.rank.is_none() => {
                return Err(Error::Validation("graph method supervised-lowrank requires graph.rank".into()));
            }
            GraphMethod::Known if self.graph.known_path.is_none() => {
                return Err(Error::Validation("graph method known requires graph.known_path".into()));
            }
            _ => {}
        }
        if let Some(s) = self.graph.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Validation(format!("graph.sigma must be positive, got {s}")));
            }
        }
        if self.graph.rank == Some(0) {
            return Err(Error::Validation("graph.rank must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Validation(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if let Some(&s) = self.strides.iter().find(|&&s| s < 2) {
            return Err(Error::Validation(format!("strides must be at least 2, got {s}")));
        }
        if self.data.test_features.is_some() != self.data.test_targets.is_some() {
            return Err(Error::Validation("test_features and test_targets must be given together".into()));
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::Validation("classification needs at least 2 classes".into()));
            }
        }
        let arch: Architecture = self.train.validate()?;
        let needed = arch.strides();
        if !self.strides.starts_with(&needed) {
            return Err(Error::Architecture {
                token: self.train.architecture.clone(),
                message: format!("pooling strides {needed:?} are not a prefix of configured strides {:?}", self.strides),
            });
        }
        self.graph.proxy.train_config().validate()?;
        Ok(())
    }

    pub fn pooling(&self) -> PoolMode {
        self.train.pooling
    }
}
