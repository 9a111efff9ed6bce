use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data outside the accepted domain.
    #[error("input error: {0}")]
    Input(String),

    /// An internal pipeline invariant was broken.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The predictor produced no firing weight at all.
    #[error("empty utterance: firing weights sum to zero")]
    EmptyUtterance,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
