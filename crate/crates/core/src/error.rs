//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column: {0}")]
    MissingColumn(String),

    #[error("non-numeric cell {value:?} in column {column} at data row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("only {rows} complete rows, at least {required} required")]
    TooFewRows { rows: usize, required: usize },

    #[error("treatment flagged binary but row {row} has value {value}")]
    NonBinaryTreatment { row: usize, value: f64 },

    #[error("outcome column {0} has zero variance")]
    ZeroVariance(usize),

    #[error("outcome columns {0} and {1} are exact duplicates")]
    DuplicateOutcome(usize, usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank-deficient design; offending columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("treatment takes a single class; propensity model undefined")]
    SingleClass,

    #[error("perfect separation in propensity model (coefficient norm {norm:.3e})")]
    PerfectSeparation { norm: f64 },

    #[error("sensitivity budget R2 = {0} outside [0, 1)")]
    BudgetOutOfRange(f64),

    #[error("budget R2 = {r2} is below the null-control minimum {r2_min}")]
    BudgetBelowMinimum { r2: f64, r2_min: f64 },

    #[error("null-control effects are outside the column space of their loadings (relative residual {relative_residual:.3e})")]
    InfeasibleNullControls { relative_residual: f64 },

    #[error("loading matrix has full row rank; no identified contrasts exist")]
    EmptyNullSpace,

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BudgetBelowMinimum { .. } | Error::InfeasibleNullControls { .. } => 3,
            Error::Numeric(_) | Error::PerfectSeparation { .. } => 4,
            _ => 2,
        }
    }
}
