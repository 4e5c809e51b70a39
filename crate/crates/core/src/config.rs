//! TOML configuration with `dims`, `paths`, `training` and `service`
//! sections. Every field has a default, so partial files are valid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attributes::PredictorTrainConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, IdentityPretrainConfig};
use crate::generator::{GeneratorConfig, GeneratorTrainConfig};
use crate::prior::{BasisConfig, GridSpec, ScoreConfig};
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DimsConfig {
    pub latent_dim: usize,
    pub layers: usize,
    pub resolution: usize,
    pub generator_channels: Vec<usize>,
}

impl Default for DimsConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self { latent_dim: g.latent_dim, layers: g.layers, resolution: g.resolution, generator_channels: g.channels }
    }
}

impl DimsConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            latent_dim: self.latent_dim,
            layers: self.layers,
            resolution: self.resolution,
            channels: self.generator_channels.clone(),
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            resolution: self.resolution,
            latent_dim: self.latent_dim,
            layers: self.layers,
            ..FusionConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub models: PathBuf,
    pub data: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { models: "models".into(), data: "data".into(), reports: "reports".into() }
    }
}

/// Edit-length search settings shared by the pipeline, the CLI and the
/// service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct SearchConfig {
    pub grid: GridSpec,
    pub score: ScoreConfig,
    /// Use the whole face instead of the accessory footprint as `M`.
    pub whole_face: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub seed: u64,
    pub target_attribute: String,
    /// Planted sprites for generator training.
    pub generator_samples: usize,
    /// Rendered sprites with an even accessory mix for the predictors.
    pub predictor_samples: usize,
    pub generator: GeneratorTrainConfig,
    pub predictor: PredictorTrainConfig,
    pub basis: BasisConfig,
    pub search: SearchConfig,
    pub pretrain: IdentityPretrainConfig,
    pub fusion: TrainingConfig,
    pub fusion_samples: usize,
    pub eval_samples: usize,
    pub interp_samples: usize,
    pub interp_steps: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            seed: 7,
            target_attribute: "face_mask".into(),
            generator_samples: 4000,
            predictor_samples: 3000,
            generator: GeneratorTrainConfig { steps: 2000, batch_size: 16, lr: 3e-3, seed: 0, adversarial_weight: 0.0 },
            predictor: PredictorTrainConfig { epochs: 6, ..PredictorTrainConfig::default() },
            basis: BasisConfig::default(),
            search: SearchConfig::default(),
            pretrain: IdentityPretrainConfig::default(),
            fusion: TrainingConfig { epochs: 6, lr: 1e-3, ..TrainingConfig::default() },
            fusion_samples: 300,
            eval_samples: 200,
            interp_samples: 50,
            interp_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub search: SearchConfig,
    /// Largest number of interpolation frames per request.
    pub max_steps: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 8080, search: SearchConfig::default(), max_steps: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub dims: DimsConfig,
    pub paths: PathsConfig,
    pub training: TrainingSection,
    pub service: ServiceConfig,
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = AppConfig::default();
        cfg.training.fusion.lr = 0.005;
        cfg.service.port = 9000;
        let text = cfg.to_toml().unwrap();
        assert_eq!(AppConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = AppConfig::from_toml("[dims]\nlatent_dim = 32\n\n[training.fusion]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.dims.latent_dim, 32);
        assert_eq!(cfg.dims.layers, 8);
        assert_eq!(cfg.training.fusion.epochs, 3);
        assert_eq!(cfg.training.fusion.batch_size, 10);
        assert_eq!(cfg.service, ServiceConfig::default());
        assert!(matches!(AppConfig::from_toml("[dims]\nlatent_dim = \"x\""), Err(Error::Format(_))));
    }
}
