use thiserror::Error;

use crate::dual::DualSolution;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum TklError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyFile(String),

    #[error("classification labels must take exactly two values, found {found}")]
    MoreThanTwoClasses { found: usize },

    #[error("classification requires both classes; only label {label} is present")]
    SingleClass { label: f64 },

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot make {folds} folds from {samples} samples")]
    FoldsExceedSamples { folds: usize, samples: usize },

    #[error("dual solver did not converge after {} iterations (kkt residual {:.3e})", .best.iterations, .best.kkt_residual)]
    NonConvergence { best: Box<DualSolution> },

    #[error("eigen solver failed: {0}")]
    EigenFailure(String),

    #[error("model format version mismatch: file has version {found}, this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("model checksum mismatch (file truncated or modified)")]
    ChecksumMismatch,

    #[error("malformed model file at line {line}: {msg}")]
    ModelFormat { line: usize, msg: String },

    #[error("quadrature oracle refuses n = {0} (limit is 3)")]
    QuadratureTooLarge(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TklError>;
