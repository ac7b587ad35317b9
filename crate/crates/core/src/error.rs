use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("variable does not belong to this graph")]
    MissingGraph,

    #[error("configuration error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("vocabulary error: unknown token `{0}`")]
    Vocabulary(String),

    #[error("non-finite {task} loss at step {step}")]
    Divergence { task: String, step: usize },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch for `{name}`: file has {found:?}, model has {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("missing dataset at {0}")]
    MissingDataset(PathBuf),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Usage/config errors map to exit status 2, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
