use std::io;

use thiserror::Error;

/// Errors raised while building, reading or writing datastores and record files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty input")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {actual} (row {row})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        row: usize,
    },
    #[error("label out of range: {label} not in [0, {num_classes}) (row {row})")]
    LabelOutOfRange {
        label: i64,
        num_classes: usize,
        row: usize,
    },
    #[error("layer group {layer} has {actual} rows, expected {expected}")]
    LayerRowMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {field} (row {row})")]
    NonFinite { field: &'static str, row: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Errors raised by index construction and nearest-neighbor search.
#[derive(Debug, Error)]
pub enum IndexError {
    #[error("empty datastore")]
    Empty,
    #[error("requested k={k} exceeds datastore size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("query dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid index config: {0}")]
    InvalidConfig(String),
    #[error("k-means needs at least {k} rows, got {rows}")]
    TooFewRows { k: usize, rows: usize },
    #[error("id {id} out of range for datastore of size {n}")]
    IdOutOfRange { id: usize, n: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised by the bounded minimizer.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error("bounds must be finite with lower <= upper (dimension {0})")]
    InvalidBounds(usize),
    #[error("dimension mismatch: problem has {expected} variables, start point has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("grid search is capped at {max} dimensions, got {dim}")]
    GridTooLarge { dim: usize, max: usize },
    #[error("grid needs at least 2 points per dimension")]
    GridTooCoarse,
    #[error("invalid option: {0}")]
    InvalidOption(String),
}

/// Errors raised by calibrators.
#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("empty logits")]
    EmptyLogits,
    #[error("empty dev set")]
    EmptyDevSet,
    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("layer count mismatch: expected {expected}, got {actual}")]
    LayerMismatch { expected: usize, actual: usize },
    #[error("empty neighborhood")]
    EmptyNeighborhood,
    #[error("empty entity span")]
    EmptySpan,
    #[error("method {0} has no fitted parameters")]
    Unfitted(String),
    #[error("parameters do not match method {0}")]
    MethodMismatch(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors raised by evaluation metrics.
#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("confidence {0} is not a finite value in [0, 1]")]
    InvalidConfidence(f64),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("repeats must be at least {min}, got {got}")]
    TooFewRepeats { min: usize, got: usize },
}

/// Errors raised while running a whole fit or evaluation.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Data(#[from] DataError),
}
