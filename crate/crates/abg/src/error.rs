//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AbgError>;

#[derive(Error, Debug)]
pub enum AbgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("slice {index} along {axis} has zero L1 norm")]
    ZeroNormSlice { axis: &'static str, index: usize },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },
    #[error("non-finite value encountered during evaluation: {0}")]
    NonFiniteEvaluation(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("vector is not on the probability simplex (sum = {sum})")]
    NotASimplex { sum: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("edge map level mismatch: expected {expected}, got {got}")]
    LevelMismatch { expected: &'static str, got: &'static str },
    #[error("empty frame sequence")]
    EmptySequence,
    #[error("relation scale {scale} out of range 2..={max}")]
    ScaleOutOfRange { scale: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("unsupported file version {0}")]
    VersionMismatch(u16),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("dimension mismatch in file: {0}")]
    DimMismatch(String),
    #[error("batch size {batch} larger than set of {set} videos")]
    BatchLargerThanSet { batch: usize, set: usize },
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("snapshot incompatible with dataset: {0}")]
    SnapshotMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl AbgError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        AbgError::Io { path: path.into(), source }
    }
}
