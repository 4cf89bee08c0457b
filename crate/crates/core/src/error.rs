use std::path::PathBuf;

use crate::embedding::EmbeddingError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition of an operation was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("manifest format error at line {line}, column {column}: {message}")]
    ManifestFormat {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("grid mismatch: expected {expected} patches, got {actual}")]
    GridMismatch { expected: usize, actual: usize },

    #[error("CRC undefined for static reference {0}")]
    CrcUndefinedForStatic(String),

    #[error("degenerate calibration set: {0}")]
    DegenerateCalibration(&'static str),

    #[error("no coherent reference bank")]
    NoCoherentBank,

    #[error("invalid thresholds: {0}")]
    Thresholds(String),

    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error(transparent)]
    Embedding(#[from] EmbeddingError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("input error: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
