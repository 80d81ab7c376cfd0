use std::io;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or channel counts do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input left the domain of a function (log of a non-positive value, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// A NaN or infinity showed up where a finite number is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A file does not carry the expected magic or version.
    #[error("format error: {0}")]
    Format(String),

    /// A structurally readable file that violates a dataset invariant.
    #[error("validation error at image {index}: {message}")]
    Validation { index: usize, message: String },

    /// A statistic is undefined for the given samples (zero variance, ...).
    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    /// A metric is undefined for the given labels (single class, no components).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad input data or arguments rather than I/O.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
