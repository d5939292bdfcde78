use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no pseudo-labels assigned: {0}")]
    NoCoverage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
