//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("class index {class} out of range for {num_classes} outputs")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("properties with different target labels cannot share one patch")]
    MixedLabels,

    #[error("box cannot be refined: every dimension has zero width")]
    RefinementExhausted,

    #[error("training diverged on patch {patch}: loss became non-finite (lower the learning rate)")]
    DivergentLoss { patch: usize },

    #[error("parse error in {path} ({location}): {message}")]
    Parse {
        path: String,
        location: String,
        message: String,
    },

    #[error("unsupported format version {found}; supported: {supported}")]
    UnsupportedVersion { found: String, supported: String },

    #[error("repair bundle is missing file for patch {index}: {file}")]
    MissingBundleFile { index: usize, file: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Attaches a file path to an I/O error.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
