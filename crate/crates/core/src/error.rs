use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("fit failed: {reason} ({excluded} nonpositive points excluded)")]
    Fit { reason: String, excluded: usize },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint {path}: format version {found} is not supported (expected {expected})")]
    CheckpointVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("I/O error on {path}{}: {source}", iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Io {
        path: PathBuf,
        iteration: Option<usize>,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            iteration: None,
            source,
        }
    }

    pub(crate) fn io_at(path: impl Into<PathBuf>, iteration: usize, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            iteration: Some(iteration),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            context,
            expected,
            got,
        }
    }
}
