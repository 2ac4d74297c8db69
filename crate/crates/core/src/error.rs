use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {details}")]
    Parse { path: PathBuf, details: String },

    #[error("unsupported mesh format for {path} (expected .obj or .ply)")]
    UnsupportedFormat { path: PathBuf },

    #[error("mesh has no faces after cleanup")]
    EmptyMesh,

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("mesh vertices are all coincident; scale is undefined")]
    ZeroExtent,

    #[error("face index {index} out of range (face count {count})")]
    FaceOutOfRange { index: usize, count: usize },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("backend error in view {view}: {message}")]
    Backend { view: usize, message: String },

    #[error("protocol violation in view {view}: {field}: {message}")]
    Protocol {
        view: usize,
        field: String,
        message: String,
    },

    #[error("mask is {got_w}x{got_h} but view is {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },

    #[error("every view failed upstream")]
    AllViewsFailed,

    #[error("invalid selection: {0}")]
    InvalidSelection(String),

    #[error("evaluation mismatch: {0}")]
    EvalMismatch(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

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

    pub(crate) fn parse(path: impl Into<PathBuf>, details: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            details: details.into(),
        }
    }
}
