use std::path::PathBuf;

use seqhtr_tensor::checkpoint::CheckpointError;
use seqhtr_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HtrError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("input contract violated: {0}")]
    InputContract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("characters not in alphabet: {0:?}")]
    UnknownCharacters(Vec<char>),

    #[error("cannot draw characters: {0:?}")]
    Undrawable(Vec<char>),

    #[error("label of length {label_len} needs {required} frames, only {frames} available")]
    LabelTooLong {
        label_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("alphabet mismatch: {0}")]
    AlphabetMismatch(String),

    #[error("non-finite loss at epoch {epoch} step {step}; batch ids: {ids:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        ids: Vec<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("dataset index {path}:{line}: {message}")]
    Index {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, HtrError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HtrError {
    let path = path.into();
    move |source| HtrError::Io { path, source }
}
