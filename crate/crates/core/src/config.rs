//! Experiment configuration, read from TOML.
//!
//! ```toml
//! regime = "hybrid"            # fixed-encoder | hybrid | ce-scratch | ce-pretrained
//!
//! [encoder]
//! conv_stack = "C6x4/4x2[8] C6x4/1x1[32] P4x2/4x2 C3x3/1x1[64] P1x2/1x2"
//! blstm_units = 256
//!
//! [attention]
//! mechanism = "hybrid-monotonic"
//! score_form = "normalized"
//!
//! [loss]
//! lambda = 0.5
//!
//! [training]
//! epochs = 200
//! clip_norm = 4.0              # 0 disables clipping
//!
//! [data]
//! train = "corpus/train"
//! valid = "corpus/valid"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{io_err, HtrError, Result};
use crate::loss::LossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Encoder loaded from a CTC checkpoint and frozen; cross-entropy only.
    FixedEncoder,
    /// Joint training with the convex CTC/cross-entropy combination.
    Hybrid,
    /// Cross-entropy only, all parameters freshly initialized.
    CeScratch,
    /// Cross-entropy only, encoder initialized from a CTC checkpoint.
    CePretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub epoch_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Number of final epochs over which the rate follows a half cosine to 0.
    pub decay_epochs: usize,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub teacher_noise: f64,
    pub seed: u64,
    pub augment: bool,
    pub bucket_width: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            epoch_size: 8192,
            batch_size: 16,
            lr: 0.001,
            decay_epochs: 50,
            clip_norm: 4.0,
            teacher_noise: 0.1,
            seed: 0,
            augment: true,
            bucket_width: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// CTC checkpoint supplying encoder weights.
    pub pretrained_encoder: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Hybrid,
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            training: TrainingConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HtrError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Weight of the CTC term actually used by the regime.
    pub fn effective_lambda(&self) -> f64 {
        match self.regime {
            Regime::Hybrid => self.loss.lambda,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.attention.validate()?;
        self.decoder.validate()?;
        let t = &self.training;
        if t.epochs == 0 || t.epoch_size == 0 || t.batch_size == 0 || t.bucket_width == 0 {
            return Err(HtrError::Config("training sizes must be positive".into()));
        }
        if t.decay_epochs > t.epochs {
            return Err(HtrError::Config("training.decay_epochs exceeds training.epochs".into()));
        }
        if !(t.lr > 0.0) || t.clip_norm < 0.0 || !(0.0..=1.0).contains(&t.teacher_noise) {
            return Err(HtrError::Config("lr must be > 0, clip_norm >= 0, teacher_noise in [0, 1]".into()));
        }
        match self.regime {
            Regime::FixedEncoder | Regime::CePretrained if self.data.pretrained_encoder.is_none() => Err(
                HtrError::Config(format!("regime {:?} requires data.pretrained_encoder", self.regime)),
            ),
            Regime::Hybrid if !self.loss.ctc_enabled => {
                Err(HtrError::Config("regime hybrid requires loss.ctc_enabled".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Constant rate, then a half cosine from `lr` to 0 over the final
/// `decay_epochs` epochs (epochs are 1-based).
pub fn lr_schedule(epoch: usize, cfg: &TrainingConfig) -> f64 {
    let plateau = cfg.epochs - cfg.decay_epochs;
    if epoch <= plateau || cfg.decay_epochs == 0 {
        return cfg.lr;
    }
    let progress = (epoch - plateau) as f64 / cfg.decay_epochs as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
