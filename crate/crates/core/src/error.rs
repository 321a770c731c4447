use std::path::PathBuf;

use thiserror::Error;

/// Grid axis named in divisibility errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Axis::Height => f.write_str("height"),
            Axis::Width => f.write_str("width"),
        }
    }
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },

    #[error("dimension `{0}` must be at least 1")]
    ZeroDimension(&'static str),

    #[error("compression factor must be at least 1")]
    ZeroFactor,

    #[error("{dim} {size} is not divisible by factor {factor}")]
    IndivisibleGrid { dim: Axis, size: usize, factor: usize },

    #[error("window at ({row}, {col}) of size {rows}x{cols} exceeds {height}x{width} map")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {step} is past the final step {total}")]
    StepOutOfRange { step: u64, total: u64 },

    #[error("not an npy file (bad magic)")]
    BadMagic,

    #[error("unsupported npy version {major}.{minor}")]
    UnsupportedVersion { major: u8, minor: u8 },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("fortran-ordered arrays are not supported")]
    FortranOrder,

    #[error("expected a rank-3 (height, width, channels) array, got shape {0:?}")]
    ShapeRank(Vec<usize>),

    #[error("malformed npy header: {0}")]
    BadHeader(String),

    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("manifest entry `{id}` declares {declared:?} but file holds {actual:?}")]
    ManifestMismatch {
        id: String,
        declared: [usize; 3],
        actual: [usize; 3],
    },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
