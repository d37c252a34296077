//! Run configuration, read from TOML.
//!
//! Every section is optional and every missing key takes its default.
//! Unknown keys are errors, in every section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phantom::{PhantomConfig, STEATOSIS_CUTOFF};
use crate::reference::ReferenceConfig;
use crate::signal::{AcquisitionConfig, EchoSubset, FatSpectrum};
use crate::training::TrainConfig;
use crate::unet::UNetSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Cross-validation and liver scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub folds: usize,
    pub split_seed: u64,
    /// Liver FF above this is called fatty.
    pub cutoff: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { folds: 5, split_seed: 0, cutoff: STEATOSIS_CUTOFF }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub acquisition: AcquisitionConfig,
    pub spectrum: FatSpectrum,
    pub phantom: PhantomConfig,
    pub reference: ReferenceConfig,
    pub network: UNetSpec,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Switch the network input to `echoes`, keeping the channel count consistent.
    pub fn with_echoes(mut self, echoes: EchoSubset) -> Result<Self, ConfigError> {
        self.training.echoes = echoes;
        self.network.in_channels = 2 * echoes.count;
        self.validate()?;
        Ok(self)
    }

    /// Phantom settings with the shared acquisition and spectrum filled in.
    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig { acquisition: self.acquisition.clone(), spectrum: self.spectrum.clone(), ..self.phantom.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.acquisition.validate().map_err(|e| invalid(&e))?;
        self.spectrum.validate().map_err(|e| invalid(&e))?;
        self.phantom_config().validate().map_err(|e| invalid(&e))?;
        self.network.validate().map_err(|e| invalid(&e))?;
        self.training.validate().map_err(|e| invalid(&e))?;
        let echoes = self.acquisition.echo_times.len();
        self.training.echoes.indices_for(echoes).map_err(|e| invalid(&e))?;
        self.reference.echoes.indices_for(echoes).map_err(|e| invalid(&e))?;
        if self.network.in_channels != 2 * self.training.echoes.count {
            return Err(ConfigError::Invalid(format!(
                "network.in_channels is {} but training.echoes = \"{}\" gives {}",
                self.network.in_channels,
                self.training.echoes,
                2 * self.training.echoes.count
            )));
        }
        if self.evaluation.folds < 2 {
            return Err(ConfigError::Invalid(format!("evaluation.folds must be at least 2, got {}", self.evaluation.folds)));
        }
        if !(0.0..1.0).contains(&self.evaluation.cutoff) {
            return Err(ConfigError::Invalid(format!("evaluation.cutoff must lie in [0, 1), got {}", self.evaluation.cutoff)));
        }
        Ok(())
    }
}
