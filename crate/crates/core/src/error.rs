use alloc::string::String;

/// Errors raised across the pruning pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Dimension {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An operation was invoked in the wrong state (empty pool, second backward, ...).
    #[error("state error: {0}")]
    State(String),
    /// A caller broke an API contract (e.g. backward from a non-scalar node).
    #[error("contract error: {0}")]
    Contract(String),
    /// A NaN or infinity showed up where a finite value is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid input data (out-of-vocabulary ids, bad labels, empty datasets).
    #[error("input error: {0}")]
    Input(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Dimension {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
