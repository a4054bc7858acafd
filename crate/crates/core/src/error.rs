use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hierarchy error: {0}")]
    Hierarchy(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("model file error: {0}")]
    Model(String),
}

pub type Result<T> = std::result::Result<T, Error>;
