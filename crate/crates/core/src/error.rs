use std::path::PathBuf;

use crate::TierId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tier {tier} is full: {requested} bytes requested, {free} bytes free")]
    TierFull { tier: TierId, requested: u64, free: u64 },

    #[error("i/o error on tier {tier} at {}: {source}", path.display())]
    Io {
        tier: TierId,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("already exists: {0}")]
    Conflict(String),

    #[error("bad logical file descriptor {0}")]
    BadFd(u64),

    #[error("{0} is read-only")]
    ReadOnly(String),

    #[error("allocation failure: {0}")]
    AllocationFailure(String),

    #[error("invalid context: {0}")]
    InvalidContext(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid device profile: {0}")]
    InvalidProfile(String),

    #[error("invalid placement scheme: {0}")]
    InvalidScheme(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("tier {0} has crashed")]
    Crashed(TierId),

    #[error("task aborted: {0}")]
    Aborted(String),
}

impl Error {
    pub(crate) fn io(tier: TierId, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            tier,
            path: path.into(),
            source,
        }
    }

    pub fn is_not_found(&self) -> bool {
        match self {
            Error::NotFound(_) => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
