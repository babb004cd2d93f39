use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeldError {
    #[error(transparent)]
    Tensor(#[from] seld_autodiff::Error),

    #[error("{0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SeldError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SeldError {
    SeldError::Invalid(msg.into())
}

/// Wraps an I/O error with what was being attempted.
pub fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> SeldError {
    let context = context.into();
    move |source| SeldError::Io { context, source }
}
