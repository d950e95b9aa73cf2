use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Block or vector dimensions do not match the declared model dims.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (non-positive-definite matrix, bad field, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A propensity function returned a value outside (0, 1].
    #[error("policy range error: {0}")]
    PolicyRange(String),

    /// A linear system was numerically rank deficient.
    #[error("rank deficiency in {system}: condition number {cond:.3e}")]
    RankDeficient { system: String, cond: f64 },

    /// Not enough records at the required coarsening stage.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Requested budget lies outside the admissible interval.
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    /// A Monte Carlo pool required by the design step is empty.
    #[error("empty pool: {0}")]
    EmptyPool(String),

    /// Policy digest of the dataset does not match the supplied policy.
    #[error("policy digest mismatch: dataset was coarsened with {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code associated with this error kind.
    ///
    /// 1 usage, 2 config/data parse, 3 infeasible budget, 4 numerical rank
    /// failure, 5 policy-digest mismatch.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::PolicyRange(_) => 2,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::InfeasibleBudget(_) => 3,
            Error::RankDeficient { .. } => 4,
            Error::InsufficientData(_) | Error::EmptyPool(_) => 4,
            Error::DigestMismatch { .. } => 5,
        }
    }
}
