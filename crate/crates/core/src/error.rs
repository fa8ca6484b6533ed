use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum AcerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric fault: {0}")]
    NumericFault(String),
    /// A stored behavior probability or density is zero at the taken action.
    #[error("corrupted replay data: {0}")]
    CorruptedData(String),
    #[error("replay memory is empty")]
    EmptyMemory,
    #[error("coverage violated at state {state}, action {action}: mu = 0 where pi > 0")]
    CoverageViolation { state: usize, action: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("not implemented: {0}")]
    Unimplemented(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = AcerError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(AcerError::InvalidArgument(msg.into()))
}
