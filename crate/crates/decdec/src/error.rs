use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("unsupported bitwidth {0}")]
    UnsupportedBits(u8),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate calibration: all activation magnitudes are zero")]
    DegenerateCalibration,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
