#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Storage(#[from] tierkv_core::Error),

    #[error("corruption in {file}: {msg}")]
    Corruption { file: String, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("store is closed")]
    Closed,

    #[error("write batch failed: {0}")]
    Batch(String),

    #[error("background task failed: {0}")]
    Background(String),
}

impl Error {
    pub(crate) fn corrupt(file: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Corruption {
            file: file.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
