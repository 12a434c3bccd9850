use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid key {text:?}: {reason}")]
    KeyFormat { text: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("hook site mismatch: adapter sites {adapter:?}, decoder sites {decoder:?}")]
    SiteMismatch {
        adapter: Vec<(usize, usize)>,
        decoder: Vec<(usize, usize)>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("insufficient data: {0}")]
    Data(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable kind, used for CLI exit codes and error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::KeyFormat { .. } => "key-format",
            Error::Shape { .. } => "shape",
            Error::SiteMismatch { .. } => "site-mismatch",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Integrity(_) => "integrity",
            Error::Divergence(_) => "divergence",
            Error::Data(_) => "data",
            Error::Candle(_) => "tensor",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
