//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ---- data ingestion ----
    #[error("missing column '{0}' in CSV header")]
    MissingColumn(String),
    #[error("column '{column}' must be 0/1 but row {row} has value '{value}'")]
    NonBinaryColumn {
        column: String,
        row: usize,
        value: String,
    },
    #[error("non-finite or unparseable value in column '{column}' at row {row}")]
    NonFiniteValue { column: String, row: usize },
    #[error("log1p transform requires y >= 0 but row {row} has y = {value}")]
    NegativeOutcomeForLog1p { row: usize, value: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("covariate dimension mismatch: expected {expected}, row {row} has {found}")]
    DimensionMismatch {
        expected: usize,
        row: usize,
        found: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    // ---- folds ----
    #[error("invalid fold count K={k} for n={n} (need 2 <= K <= n)")]
    InvalidFoldCount { n: usize, k: usize },

    // ---- moments ----
    #[error("custom moment exceeded its declared bound {bound} at y={y}: |M|={value}")]
    UnboundedCustomMoment { y: f64, bound: f64, value: f64 },
    #[error("moment family has no affine decomposition in beta")]
    NotDecomposable,

    // ---- nuisance fitting / evaluation ----
    #[error("degenerate training arm: {0}")]
    DegenerateArm(String),
    #[error("learner failed to converge: {0}")]
    LearnerDivergence(String),
    #[error("beta {0} is not on the prepared grid")]
    BetaNotOnGrid(f64),

    // ---- estimation ----
    #[error("empty fold")]
    EmptyFold,
    #[error("no treated units in the data")]
    NoTreatedUnits,
    #[error("delta^A is zero at x-atom {0}; the instrument is irrelevant there")]
    ZeroDeltaA(usize),
    #[error("law is degenerate: {0}")]
    DegenerateLaw(String),

    // ---- inference ----
    #[error("variance estimate is degenerate (w'Sigma w <= 0)")]
    DegenerateVariance,
    #[error("Sigma is singular at beta = {0}")]
    SingularSigma(f64),

    // ---- configuration ----
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid GLIM generator: {0}")]
    InvalidGlim(String),
}

impl Error {
    /// Coarse classification used by the CLI to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            MissingColumn(_)
            | NonBinaryColumn { .. }
            | NonFiniteValue { .. }
            | NegativeOutcomeForLog1p { .. }
            | EmptyDataset
            | DimensionMismatch { .. }
            | Io(_)
            | Csv(_) => ErrorKind::Data,
            InvalidFoldCount { .. } | InvalidConfig(_) | InvalidGlim(_) | NotDecomposable => {
                ErrorKind::Config
            }
            _ => ErrorKind::Numerical,
        }
    }
}

/// Error classes mapped to process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}
