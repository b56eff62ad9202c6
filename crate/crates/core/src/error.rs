//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or signal dimensions do not conform.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A value lies outside its admissible range.
    #[error("out of range: {0}")]
    Range(String),
    /// A scalar argument is invalid (factor, threshold, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Inconsistent or unsupported configuration.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A shift would push an annotation out of the signal.
    #[error("augmentation rejected: {0}")]
    Augmentation(String),
    /// Dataset is empty or ill-formed.
    #[error("dataset error: {0}")]
    Dataset(String),
    /// Training produced a non-finite loss or gradient.
    #[error("training error: {0}")]
    Training(String),
    /// Metric computation impossible (no matched frames, bad labels).
    #[error("evaluation error: {0}")]
    Evaluation(String),
    /// Synthetic frame generation failed.
    #[error("generator error: {0}")]
    Generator(String),
    /// A file does not follow the expected layout.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
