use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),

    #[error("unsupported NIfTI datatype code {0} (expected 2, 4 or 16)")]
    UnsupportedDatatype(i16),

    #[error("truncated voxel data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("requested {k} supervoxels but the volume has only {voxels} voxels")]
    KTooLarge { k: usize, voxels: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no foreground class present in the label volume")]
    EmptyForeground,

    #[error("no confident voxels: partial cross-entropy has no supervision")]
    NoConfidentVoxels,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad patch shape: {0}")]
    BadPatchShape(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
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

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
