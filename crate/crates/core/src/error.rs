//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty matrix")]
    EmptyMatrix,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("data length {len} does not match shape {rows}x{cols}")]
    BadLength { len: usize, rows: usize, cols: usize },

    #[error("nonpositive temperature: {0}")]
    NonpositiveTemperature(f64),

    #[error("needs at least one negative (batch size {0})")]
    NeedsNegative(usize),

    #[error("needs at least one negative column (dimension {0})")]
    NeedsNegativeColumn(usize),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("lambda out of [0,1]: {0}")]
    LambdaOutOfRange(f64),

    #[error("output node is not scalar: shape {0:?}")]
    NotScalar((usize, usize)),

    #[error("degenerate column {0}")]
    DegenerateColumn(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot separate centers after {0} attempts")]
    CannotSeparateCenters(usize),

    #[error("truncated file at byte offset {offset}: expected record of {record} bytes")]
    Truncated { offset: usize, record: usize },

    #[error("label {label} out of range at byte offset {offset}")]
    LabelOutOfRange { label: u32, offset: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("crop smaller than 1 pixel ({width}x{height})")]
    CropTooSmall { width: usize, height: usize },

    #[error("diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
