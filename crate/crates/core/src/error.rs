use thiserror::Error;

use crate::tensor::Shape5;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: Shape5, actual: Shape5 },

    #[error("channel mismatch: expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("element count overflows usize for shape {0:?}")]
    Overflow([usize; 5]),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid convolution spec: {0}")]
    InvalidConv(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
