use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor/network shape mismatch, reported at graph construction time.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration or argument value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent data, with a locus (line/record) when known.
    #[error("data error: {0}")]
    Data(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Train(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CoreError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }
    pub fn train(msg: impl Into<String>) -> Self {
        CoreError::Train(msg.into())
    }
}
