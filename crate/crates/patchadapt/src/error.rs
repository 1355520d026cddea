//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed an operation something outside its contract
    /// (shape mismatch, non-finite coordinate, missing fusion block, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration that cannot be realized (patch larger than frame,
    /// unknown config key, incompatible dimensions).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Dataset / feature-file / checkpoint problems: missing files,
    /// corrupt payloads, dimension mismatches. Messages name the clip or path.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Training diverged or had to stop; message names epoch and component.
    #[error("training aborted: {0}")]
    TrainAbort(String),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Process exit code the CLI uses for this error:
    /// 1 usage/config, 2 data, 3 training abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) => 1,
            Error::InvalidInput(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::TrainAbort(_) => 3,
        }
    }
}
