use std::path::PathBuf;

/// Unified error type for the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A primitive produced NaN or Inf, or a gradient went non-finite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed input file (WAV, cache, checkpoint, vocabulary, BPE).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration or command usage.
    #[error("config error: {0}")]
    Config(String),

    /// Parameter transfer between checkpoints failed.
    #[error("transfer error: {0}")]
    Transfer(String),

    /// Corpus ingestion problem (count mismatches, empty corpus, ...).
    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code contract: 2 = usage/config/data error, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
