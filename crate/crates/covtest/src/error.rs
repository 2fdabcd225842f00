use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("test computation needs p >= 2 features and n >= 3 samples, got {p} x {n}")]
    TooSmallForTest { p: usize, n: usize },
    #[error("row {0} has zero variance")]
    ZeroVarianceRow(usize),
    #[error("subset must contain at least 2 samples, got {0}")]
    SubsetTooSmall(usize),
    #[error("sample index {index} out of bounds for {n} samples")]
    IndexOutOfBounds { index: usize, n: usize },
    #[error("design matrix is rank deficient")]
    RankDeficientDesign,
    #[error("both group labels must appear at least once")]
    EmptyGroup,
    #[error("outcome is constant")]
    ConstantOutcome,
    #[error("every feature pair has a constant product vector")]
    AllPairsDegenerate,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("exhaustive enumeration supports n <= {max}, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("permutation plan needs at least one permutation")]
    InvalidPlan,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("value outside [0, 1]: {0}")]
    OutOfRange(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
