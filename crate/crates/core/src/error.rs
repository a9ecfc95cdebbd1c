use std::path::PathBuf;

use crate::ad::AdError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("vMF rejection sampler exceeded {0} proposals")]
    RejectionBudget(usize),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
