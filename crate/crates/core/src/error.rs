use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain of the operation (non-positive
    /// precision, shape mismatch, empty grid, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent configuration: hyperparameters, dimensions or settings
    /// that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A serialized container or data file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// An optimizer produced a non-finite objective.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn format<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
