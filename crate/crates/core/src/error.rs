use thiserror::Error;

#[derive(Debug, Error)]
pub enum CarveError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("size overflow: {0}")]
    Size(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// A mask or plan broke a precondition the kernel relies on.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {file} at offset {offset}: {msg}")]
    Parse {
        file: String,
        offset: u64,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CarveError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CarveError::Shape(msg.into()))
}

pub(crate) fn domain_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CarveError::Domain(msg.into()))
}
