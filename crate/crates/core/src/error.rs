use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place {what} after {attempts} attempts")]
    Placement { what: &'static str, attempts: usize },

    #[error("link distance {0:.6} m is below the 1 m guard")]
    TooClose(f64),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("episode already terminated; call reset first")]
    EpisodeOver,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("unsupported {kind} version {found} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code grouping errors by category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::Placement { .. } | Error::Dimension { .. } => 2,
            Error::Io { .. } => 3,
            Error::Version { .. } | Error::Corrupt { .. } | Error::Csv(_) | Error::Json(_) => 4,
            Error::Diverged(_) => 5,
            Error::TooClose(_) | Error::EpisodeOver => 6,
        }
    }
}
