//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the geo-localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is outside its legal range.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation precondition was violated (e.g. click out of bounds).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A manifest record or dataset invariant failed validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A manifest line could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    /// Anything that went wrong at run time and fits no other bucket.
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad inputs rather than a failing run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape(_)
                | Error::Config(_)
                | Error::Precondition(_)
                | Error::Validation(_)
                | Error::Parse { .. }
        )
    }
}
