//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A bounding box violated its invariants (x1 < x2, y1 < y2, finite).
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    /// No hand box is available where one was required. Callers that can
    /// fall back to the full frame catch this variant.
    #[error("no detection: {0}")]
    NoDetection(String),

    /// A feature map had inconsistent dimensions or non-finite values.
    #[error("invalid feature map: {0}")]
    InvalidMap(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Probability vector with negative entries or mass not summing to 1.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Labels were required (source-domain data) but absent.
    #[error("missing labels: {0}")]
    MissingLabels(String),

    /// A file did not parse as the expected on-disk format.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Checkpoint parameters did not match the config they claim to belong to.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
