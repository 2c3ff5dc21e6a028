use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A centered Gram matrix has (numerically) zero norm: every patch in the
    /// view carries the same feature.
    #[error("degenerate input: centered kernel norm {norm:.3e} below threshold")]
    DegenerateInput { norm: f64 },

    #[error("row {row} has near-zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("series must have at least two entries and a positive mean")]
    EmptyOrZeroMean,

    #[error("invalid crop box [{x0}, {y0}, {x1}, {y1}]")]
    InvalidBox { x0: f64, y0: f64, x1: f64, y1: f64 },

    #[error("boxes do not intersect")]
    EmptyIntersection,

    #[error("infeasible crop constraint: {0}")]
    InfeasibleConstraint(String),

    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("cache does not match the requested backward pass: {0}")]
    StaleCache(String),

    #[error("non-finite loss at step {step} (last good step: {last_good:?})")]
    NonFiniteLoss { step: usize, last_good: Option<usize> },

    #[error("log lengths differ or are shorter than the window: {0}")]
    LengthMismatch(String),

    #[error("requested {k} clusters from {n} points")]
    KTooLarge { k: usize, n: usize },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
