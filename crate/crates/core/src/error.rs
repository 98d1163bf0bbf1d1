use thiserror::Error;

/// Errors surfaced by the library. The variants map onto distinct process
/// exit codes in the command line front end.
#[derive(Debug, Error)]
pub enum NervError {
    /// Invalid configuration or precondition on user supplied settings.
    #[error("config error: {0}")]
    Config(String),

    /// Two tensors (or a tensor and a declared layout) disagree in shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or inconsistent input data (frames, bitstreams, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged.
    #[error("numeric failure at step {step} (lr {lr:e}): {reason}")]
    Numeric { step: usize, lr: f64, reason: String },

    #[error("symbol {0} is not covered by the frequency table")]
    SymbolOutOfTable(i32),

    #[error("config hash mismatch: bitstream carries {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NervError> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NervError::Config(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NervError::Shape(msg.into()))
}

pub(crate) fn data_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(NervError::Data(msg.into()))
}
