//! Run configuration read from TOML. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::SelectionSearchConfig;
use crate::backbone::BackboneSpec;
use crate::eval::{EvalMode, EvalSettings};
use crate::fewshot::Episode;
use crate::metaopt::TrainConfig;
use crate::rng::{key, TAG_EPISODE};
use crate::tasks::{find_suite, sample_episode, PretrainConfig, Split, SuiteSpec, TaskError, Which};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config schema: {0}")]
    Schema(String),
    #[error("config format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<TaskError> for ConfigError {
    fn from(e: TaskError) -> Self {
        ConfigError::Schema(e.to_string())
    }
}

/// A catalog suite by name, or a full inline definition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SuiteRef {
    Name(String),
    Inline(Box<SuiteSpec>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub selection: SelectionSearchConfig,
    pub ft_steps: usize,
    /// Used when `lr_grid` is empty.
    pub ft_lr: f64,
    /// Candidate fine-tuning rates, searched per domain on validation episodes.
    pub lr_grid: Vec<f64>,
    pub lr_search_episodes: usize,
    pub leave_one_out: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            selection: SelectionSearchConfig::default(),
            ft_steps: 50,
            ft_lr: 1e-3,
            lr_grid: vec![0.0, 3e-4, 1e-3, 3e-3, 1e-2],
            lr_search_episodes: 20,
            leave_one_out: true,
        }
    }
}

fn default_version() -> u32 {
    FORMAT_VERSION
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    pub suite: SuiteRef,
    #[serde(default)]
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(suite: &str) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            suite: SuiteRef::Name(suite.to_string()),
            backbone: BackboneSpec::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            output_dir: default_output(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        // version first, so a future file fails on the version rather than on a new key
        let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        if let Some(v) = table.get("format_version") {
            let found = v
                .as_integer()
                .ok_or_else(|| ConfigError::Schema("format_version must be an integer".into()))?;
            if found != i64::from(FORMAT_VERSION) {
                return Err(ConfigError::Version {
                    found: u32::try_from(found).unwrap_or(u32::MAX),
                });
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ConfigError::Version {
                found: self.format_version,
            });
        }
        let suite = self.suite_spec()?;
        if suite.input_dim() != self.backbone.input_dim {
            return Err(ConfigError::Schema(format!(
                "backbone input_dim {} does not match suite input_dim {}",
                self.backbone.input_dim,
                suite.input_dim()
            )));
        }
        self.train.validate().map_err(|e| ConfigError::Schema(e.to_string()))?;
        self.adapt
            .selection
            .validate()
            .map_err(|e| ConfigError::Schema(e.to_string()))?;
        if self.adapt.lr_grid.iter().any(|lr| !lr.is_finite() || *lr < 0.0) || !(self.adapt.ft_lr >= 0.0) {
            return Err(ConfigError::Schema("fine-tuning rates must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn suite_spec(&self) -> Result<SuiteSpec, ConfigError> {
        let spec = match &self.suite {
            SuiteRef::Name(n) => find_suite(n)?,
            SuiteRef::Inline(s) => (**s).clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn eval_settings(&self, mode: EvalMode) -> EvalSettings {
        EvalSettings {
            mode,
            route: self.train.direct_route,
            gate_mode: self.train.gate_mode,
            metric: self.train.metric,
            selection: self.adapt.selection.clone(),
            ft_steps: self.adapt.ft_steps,
            ft_lr: self.adapt.ft_lr,
            ft_lr_by_domain: Default::default(),
            leave_one_out: self.adapt.leave_one_out,
            seed: self.train.seed,
        }
    }
}

/// Training episode `i` of step `step`; distinct seeds see distinct streams.
pub fn train_episode(spec: &SuiteSpec, seed: u64, step: u64, i: usize) -> Episode {
    sample_episode(spec, Split::Train, Which::Id, key(seed, &[TAG_EPISODE, step, i as u64]))
        .expect("train/id episodes are always valid for a validated suite")
}
