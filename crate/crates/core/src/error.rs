use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("row {0} has every position masked")]
    FullyMaskedRow(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("pipeline stage out of order: expected {expected}, attempted {attempted}")]
    StageOrder {
        expected: &'static str,
        attempted: &'static str,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
