use thiserror::Error;

/// Errors raised across the codec, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error in {field}: {detail}")]
    Format { field: String, detail: String },
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("integrity error in entry `{entry}`: {detail}")]
    Integrity { entry: String, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("serialization error: {0}")]
    Serde(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
