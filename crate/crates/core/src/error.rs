use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,

    #[error("non-finite coordinate at point {index}")]
    NonFinitePoint { index: usize },

    #[error("rotation is not in SO(3): orthogonality error {orthogonality:.3e}, det {det}")]
    InvalidRotation { orthogonality: f64, det: f64 },

    #[error("non-finite translation")]
    InvalidTranslation,

    #[error("degenerate covariance: sigma2 = {0}")]
    DegenerateCovariance(f64),

    #[error("no effective correspondences for set {set}")]
    NoEffectiveCorrespondences { set: usize },

    #[error("need at least two point sets, got {0}")]
    TooFewSets(usize),

    #[error("set count mismatch: expected {expected}, got {actual}")]
    SetCountMismatch { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: invalid rotation for set '{set}': {source}")]
    InvalidStoredTransform {
        path: PathBuf,
        set: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(path: &std::path::Path, location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
