use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("quaternion norm {0:e} is too small to normalize")]
    ZeroQuaternion(f64),
    #[error("matrix is not a rotation (orthonormality residual {0:e})")]
    NotARotation(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("scene spec contains no geometry")]
    EmptyScene,
    #[error("no retrieval candidates for query {0}")]
    NoCandidates(String),
    #[error("unknown record id {0}")]
    UnknownRecord(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("corrupt depth raster {path}: {reason}")]
    CorruptDepth { path: PathBuf, reason: String },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("degenerate scale/shift alignment: {0}")]
    DegenerateAlignment(String),
    #[error("no source views within the rotation gate of the target")]
    NoSources,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("no training pairs available")]
    EmptyTrainingSet,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
