use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix file format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("dictionary is numerically rank zero (largest singular value {largest:e})")]
    DegenerateDictionary { largest: f64 },

    #[error("gradient descent diverged after {} steps; reduce the step size", trace.len().saturating_sub(1))]
    StepSize { trace: Vec<f64> },

    #[error("missing patches for image {image}: {gaps:?}")]
    MissingPatches {
        image: usize,
        gaps: Vec<(usize, usize)>,
    },

    #[error("could not find a training column with non-zero norm after {attempts} draws")]
    ZeroColumns { attempts: usize },

    #[error("singular value decomposition did not converge")]
    SvdFailed,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDictionary { .. }
                | Error::StepSize { .. }
                | Error::SvdFailed
                | Error::ZeroColumns { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
