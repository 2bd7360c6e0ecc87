//! Error type shared across the crate.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("token id {id} out of vocabulary (size {vocab})")]
    OutOfVocab { id: u16, vocab: usize },

    #[error("unknown word {word:?} (vocabulary has {vocab} words)")]
    UnknownWord { word: String, vocab: usize },

    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },

    #[error("gradient missing for parameter {0:?}")]
    MissingGrad(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad file format: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
}

impl Error {
    /// Attach path context to an I/O error.
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
