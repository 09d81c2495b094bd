//! Parameter container tying encoder and decoder together, with
//! checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use seqhtr_tensor::checkpoint::{read_checkpoint, write_checkpoint};
use seqhtr_tensor::{AdamState, ParamStore};

use crate::alphabet::Alphabet;
use crate::config::{ExperimentConfig, Regime};
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{io_err, HtrError, Result};

pub const ENCODER_PREFIX: &str = "encoder/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Encoder with a CTC head only.
    Encoder,
    Seq2seq,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    kind: ModelKind,
    alphabet: String,
    epoch: usize,
    config: ExperimentConfig,
}

pub struct Recognizer {
    pub config: ExperimentConfig,
    pub alphabet: Alphabet,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Option<Decoder>,
    /// Epochs trained so far.
    pub epoch: usize,
}

impl Recognizer {
    /// Fresh parameters drawn from `config.training.seed`.
    pub fn new(config: &ExperimentConfig, alphabet: &Alphabet, kind: ModelKind) -> Result<Self> {
        config.encoder.validate(kind == ModelKind::Encoder || config.effective_lambda() > 0.0, alphabet)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.training.seed ^ 0x5eed_1417);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &mut rng, &config.encoder, alphabet)?;
        let decoder = match kind {
            ModelKind::Encoder => None,
            ModelKind::Seq2seq => Some(Decoder::new(
                &mut params,
                &mut rng,
                &config.decoder,
                &config.attention,
                alphabet,
                encoder.output_channels(),
            )?),
        };
        Ok(Self {
            config: config.clone(),
            alphabet: alphabet.clone(),
            params,
            encoder,
            decoder,
            epoch: 0,
        })
    }

    pub fn kind(&self) -> ModelKind {
        if self.decoder.is_some() {
            ModelKind::Seq2seq
        } else {
            ModelKind::Encoder
        }
    }

    /// Builds a sequence model for `config`, pulling encoder weights from
    /// the configured CTC checkpoint and freezing them as the regime demands.
    pub fn for_regime(config: &ExperimentConfig, alphabet: &Alphabet) -> Result<Self> {
        config.validate()?;
        let mut model = Self::new(config, alphabet, ModelKind::Seq2seq)?;
        if matches!(config.regime, Regime::FixedEncoder | Regime::CePretrained) {
            let path = config.data.pretrained_encoder.as_ref().expect("validated");
            let (pre, _) = Self::load(path)?;
            if pre.alphabet != *alphabet {
                return Err(HtrError::AlphabetMismatch(format!(
                    "pretrained encoder alphabet {:?} differs from {:?}",
                    pre.alphabet.as_string(),
                    alphabet.as_string()
                )));
            }
            model.adopt_encoder(&pre.params)?;
        }
        if config.regime == Regime::FixedEncoder {
            model.params.set_trainable_prefix(ENCODER_PREFIX, false);
        }
        Ok(model)
    }

    /// Copies every `encoder/` parameter from `other`; all must be present.
    pub fn adopt_encoder(&mut self, other: &ParamStore) -> Result<()> {
        let loaded = self.params.load_matching(other, ENCODER_PREFIX)?;
        let expected = self.params.iter().filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX)).count();
        if loaded.len() != expected {
            return Err(HtrError::Config(format!(
                "pretrained checkpoint supplied {} of {expected} encoder parameters",
                loaded.len()
            )));
        }
        Ok(())
    }

    pub fn encoder_frozen(&self) -> bool {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .all(|(_, p)| !p.trainable)
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        let meta = Metadata {
            kind: self.kind(),
            alphabet: self.alphabet.as_string(),
            epoch: self.epoch,
            config: self.config.clone(),
        };
        let json = serde_json::to_string(&meta).expect("metadata serializes");
        let f = File::create(path).map_err(io_err(path))?;
        write_checkpoint(BufWriter::new(f), &json, &self.params, adam).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamState>)> {
        let f = File::open(path).map_err(io_err(path))?;
        let ck = read_checkpoint(BufReader::new(f))?;
        let meta: Metadata = serde_json::from_str(&ck.metadata)
            .map_err(|e| HtrError::Config(format!("checkpoint metadata: {e}")))?;
        let alphabet = Alphabet::new(meta.alphabet.chars())?;
        let mut model = Self::new(&meta.config, &alphabet, meta.kind)?;
        if model.params.len() != ck.params.len() {
            return Err(HtrError::Config(format!(
                "checkpoint holds {} parameters, the configured model {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        let loaded = model.params.load_matching(&ck.params, "")?;
        if loaded.len() != model.params.len() {
            return Err(HtrError::Config("checkpoint parameter names do not match the model".into()));
        }
        for (_, p) in ck.params.iter() {
            let id = model.params.id(&p.name).expect("matched");
            model.params.get_mut(id).trainable = p.trainable;
        }
        model.epoch = meta.epoch;
        Ok((model, ck.adam))
    }
}
