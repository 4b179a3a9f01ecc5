use thiserror::Error;

/// Errors surfaced by the public API (I/O, configuration, user input).
///
/// Internal shape contracts inside the compute graph are programmer errors
/// and panic with a descriptive message instead.
#[derive(Debug, Error)]
pub enum PhedError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PhedError>;
