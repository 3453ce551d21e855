use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid variant '{0}' (expected one of n, s, m, l, x)")]
    InvalidVariant(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("weights: {0}")]
    Weights(String),

    #[error("annotations: {0}")]
    Annotations(String),

    #[error("config: {0}")]
    Config(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::InvalidVariant(_) | Error::InvalidSpec(_) | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
