//! Run configuration: one TOML document with a section per stage. Every
//! field has a default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::diffusion::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::sampler::SampleConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { samples: 512, resolution: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate at most this many manifest entries (0 = all).
    pub max_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_samples: 32 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.samples == 0 || self.data.resolution == 0 || self.data.resolution % 8 != 0 {
            return Err(Error::Config("data.samples must be positive and data.resolution a multiple of 8".into()));
        }
        self.codec.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_roundtrip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 3e-4;
        cfg.model.channel_mult = vec![1, 2];
        cfg.sample.eta = 0.5;
        let text = cfg.to_toml();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_take_defaults_and_unknown_keys_fail() {
        let cfg = RunConfig::parse("[train]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.data, DataConfig::default());
        assert!(RunConfig::parse("[train]\nstepz = 10\n").is_err());
        assert!(RunConfig::parse("[nonsense]\n").is_err());
        assert!(RunConfig::parse("[data]\nresolution = 60\n").is_err());
    }
}
