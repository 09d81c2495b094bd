//! Attention-based sequence-to-sequence handwritten text recognition:
//! a CNN/BLSTM encoder, an attention LSTM decoder, CTC and cross-entropy
//! losses, synthetic line data and CER evaluation.

pub mod alphabet;
pub mod attention;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod search;
pub mod session;

pub use alphabet::Alphabet;
pub use config::{ExperimentConfig, Regime};
pub use error::{HtrError, Result};
pub use model::{ModelKind, Recognizer};
pub use seqhtr_tensor as tensor;
