use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine, the models and the data pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{path}: {msg}")]
    Load { path: PathBuf, msg: String },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
