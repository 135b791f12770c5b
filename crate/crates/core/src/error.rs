use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("context overflow: {needed} positions requested, context length is {n_max}")]
    ContextOverflow { needed: usize, n_max: usize },

    #[error("non-finite values in {tensor}")]
    NonFinite { tensor: String },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("gradient check failed: max relative error {max_rel_error:.3e} at {worst}")]
    GradientCheck { max_rel_error: f64, worst: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failure modes when reading a checkpoint. Each one is distinct so callers
/// can tell a stale file from a corrupted one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint header is not valid: {0}")]
    Header(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("tensor directory does not match the model configuration: {0}")]
    Shape(String),

    #[error("vocabulary hash mismatch: checkpoint was built with {stored}, got {actual}")]
    VocabHash { stored: String, actual: String },

    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("refusing to save: tensor {0} contains non-finite values")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
