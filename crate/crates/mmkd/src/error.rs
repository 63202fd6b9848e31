//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MmkdError {
    /// Invalid configuration, shape mismatch between configured components,
    /// or malformed command-line input. Maps to process exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values encountered during training. Maps to exit code 3.
    #[error("training error: {0}")]
    Training(String),

    /// Malformed binary file (checkpoint, IDX, dataset cache).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// The hard buffer does not yet hold enough samples for an outer update;
    /// callers treat this as "skip this round", not as a failure.
    #[error("hard buffer not yet warmed up")]
    BufferNotReady,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MmkdError>;

impl MmkdError {
    pub fn config(msg: impl Into<String>) -> Self {
        MmkdError::Config(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        MmkdError::Training(msg.into())
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        MmkdError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code for the CLI: 0 success, 2 configuration, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            MmkdError::Config(_) => 2,
            MmkdError::Training(_) => 3,
            _ => 1,
        }
    }
}
