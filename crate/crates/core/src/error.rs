use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: Shape,
        found: Shape,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("image {height}x{width} is too small: {reason}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("non-finite activation at layer #{layer} ({op}) in `{scope}`")]
    NonFinite {
        layer: usize,
        op: &'static str,
        scope: String,
    },

    #[error("non-finite loss at iteration {iteration} in component `{component}`")]
    NonFiniteLoss { iteration: u64, component: String },

    #[error("dataset sample `{id}`: {reason}")]
    Dataset { id: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint tensor `{name}` has shape {found}, model expects {expected}")]
    TensorMismatch {
        name: String,
        expected: Shape,
        found: Shape,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: image decode failed: {message}")]
    Decode { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(context: impl Into<String>, expected: Shape, found: Shape) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
