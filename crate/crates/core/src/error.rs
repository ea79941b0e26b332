use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vertex set: {0}")]
    DegenerateMesh(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("degenerate rotation curve: raw quaternion norm {norm:e} at tau={tau}")]
    DegenerateRotation { tau: f64, norm: f64 },

    #[error("vertex {index} behind the near plane (depth {depth})")]
    BehindNearPlane { index: usize, depth: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimization diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image too small: {0}")]
    ImageTooSmall(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {}: {source}", path.display())]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error on {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Diverged { .. }
                | Error::NonFinite(_)
                | Error::DegenerateRotation { .. }
                | Error::BehindNearPlane { .. }
        )
    }
}
