use std::path::PathBuf;

use crate::volume::BlockCoord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot project point with non-positive depth z = {0}")]
    InvalidProjection(f64),
    #[error("cannot unproject pixel with non-positive depth z = {0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("overlap undefined: keyframe has no valid depth pixels")]
    UndefinedOverlap,
    #[error("block {coord:?} required outside the active streaming sphere")]
    StreamingContract { coord: BlockCoord },
    #[error("de-integration inconsistency at block {coord:?} voxel {voxel}: weight {weight} - {sample} < 0")]
    Inconsistency {
        coord: BlockCoord,
        voxel: usize,
        weight: f64,
        sample: f64,
    },
    #[error("malformed pose update: {0}")]
    MalformedEvent(String),
    #[error("mesh has zero total area")]
    DegenerateMesh,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("model mesh is empty: completeness is unbounded")]
    EmptyModel,
    #[error("trajectory does not cover frame {0}")]
    IncompleteTrajectory(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
