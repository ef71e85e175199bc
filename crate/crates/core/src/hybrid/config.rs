//! The full hyperparameter record, read from and written to TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dptnet::DptConfig;
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::swinunet::SwinUnetConfig;

/// How the two branch outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Sum of both branches.
    #[default]
    Both,
    Spectral,
    Temporal,
    /// The noisy input, unchanged.
    Passthrough,
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Fusion::Both),
            "spectral" => Ok(Fusion::Spectral),
            "temporal" => Ok(Fusion::Temporal),
            "passthrough" => Ok(Fusion::Passthrough),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

impl Fusion {
    pub fn uses_spectral(self) -> bool {
        matches!(self, Fusion::Both | Fusion::Spectral)
    }

    pub fn uses_temporal(self) -> bool {
        matches!(self, Fusion::Both | Fusion::Temporal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Use `alpha` as given.
    #[default]
    Fixed,
    /// Per clip, `α = E_spec / (E_spec + E_time)` from the clean target, with
    /// both energies taken as mean squared magnitudes.
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            alpha_mode: AlphaMode::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub lr_scale: f64,
    pub d_model: usize,
    pub warmup: usize,
    pub max_grad_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Share of the dataset held out for validation (at least one clip when
    /// positive and the set has more than one clip).
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 100,
            batch_size: 4,
            max_steps: None,
            lr_scale: 1.0,
            d_model: 64,
            warmup: 200,
            max_grad_norm: 5.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: Fusion,
    pub stft: StftConfig,
    pub swinunet: SwinUnetConfig,
    pub dptnet: DptConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.swinunet.validate()?;
        self.dptnet.validate()?;
        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.alpha) {
            return Err(Error::Config(format!("loss.alpha {} not in [0, 1]", l.alpha)));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.d_model == 0 || t.warmup == 0 {
            return Err(Error::Config("train.batch_size, d_model and warmup must be positive".into()));
        }
        if !(t.lr_scale > 0.0) || !(t.max_grad_norm > 0.0) || !(t.eps > 0.0) {
            return Err(Error::Config("train.lr_scale, max_grad_norm and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config(format!("adam betas ({}, {}) not in [0, 1)", t.beta1, t.beta2)));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config(format!("train.validation_fraction {}", t.validation_fraction)));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

impl ModelConfig {
    /// A very small model (a few thousand parameters) for gradient checks
    /// and smoke tests.
    pub fn tiny() -> Self {
        ModelConfig {
            swinunet: SwinUnetConfig {
                patch_size: 2,
                embed_dim: 4,
                depths: vec![2, 2],
                heads: vec![2, 2],
                window: 2,
                mlp_ratio: 2,
                ..SwinUnetConfig::default()
            },
            dptnet: DptConfig {
                enc_channels: 4,
                enc_kernel: 16,
                enc_stride: 8,
                chunk: 16,
                num_blocks: 1,
                heads: 2,
                gru_hidden: Some(4),
                compress_factor: 2,
            },
            ..ModelConfig::default()
        }
    }
}
