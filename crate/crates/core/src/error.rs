use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),
    #[error("word {word:?} has {len} characters, at most {max} allowed")]
    WordTooLong { word: String, len: usize, max: usize },
    #[error("word is empty after normalization")]
    EmptyWord,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("model dimension {0} is not divisible by 4")]
    BadDim(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("target of length {target_len} needs {required} slots, only {slots} available")]
    InfeasibleTarget {
        target_len: usize,
        required: usize,
        slots: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at step {step}: total loss {loss}")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptBlob(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
