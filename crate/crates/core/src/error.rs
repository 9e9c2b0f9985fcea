use std::path::PathBuf;

/// Errors produced by the splatting engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A scene file could not be decoded. `offset` is the byte position where decoding stopped.
    #[error("scene format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A caller broke an API precondition (mismatched shapes, stale forward state, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
