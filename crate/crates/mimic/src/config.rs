//! Experiment configuration: one TOML file drives every subcommand.
//! Unknown keys are rejected so typos fail loudly instead of silently
//! running a different experiment.

use std::path::{Path, PathBuf};

use crate::api::EndpointConfig;
use crate::nn::ArchitectureSpec;
use crate::trainer::RunConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Labeled set for mentor training; optional for attack-only runs.
    pub train_manifest: Option<PathBuf>,
    /// Held-out labeled set; used strictly for evaluation.
    pub test_manifest: PathBuf,
    /// Unlabeled query pool for the attack pipelines.
    pub pool_manifest: Option<PathBuf>,
}

/// Two conv blocks plus a dense head; the desk-scale stand-in for the
/// full convolutional stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub conv_channels: (usize, usize),
    pub hidden: usize,
    /// 0 disables the dropout layer entirely.
    pub dropout: f32,
}

impl ArchConfig {
    pub fn to_spec(&self, input_shape: Vec<usize>, num_classes: usize) -> ArchitectureSpec {
        ArchitectureSpec::small_cnn(
            input_shape,
            self.conv_channels,
            self.hidden,
            num_classes,
            self.dropout,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MentorConfig {
    pub arch: ArchConfig,
    /// Where `mentor-train` writes the model and `serve`/`attack` read it.
    pub model_path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub mentor: MentorConfig,
    pub student: ArchConfig,
    pub run: RunConfig,
    pub endpoint: Option<EndpointConfig>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// The top-level seed is authoritative: it overwrites the per-section
    /// seeds so one number reproduces the whole experiment.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.run.seed = seed;
        if let Some(c) = self.run.composite.as_mut() {
            c.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(ep) = &self.endpoint {
            ep.validate().map_err(ConfigError::Invalid)?;
        }
        if !(0.0..1.0).contains(&self.student.dropout)
            || !(0.0..1.0).contains(&self.mentor.arch.dropout)
        {
            return Err(ConfigError::Invalid("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}
