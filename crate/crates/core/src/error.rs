use thiserror::Error;

/// Errors raised anywhere in the simulation and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric integration failed at t = {t:.6} h: {reason}")]
    Integration { t: f64, reason: String },

    #[error(
        "threshold calibration cannot place the MTD-regimen at index {target}; achievable positions: {achievable:?}"
    )]
    CalibrationInfeasible { target: usize, achievable: Vec<usize> },

    #[error("prior calibration is degenerate: {0}")]
    CalibrationDegenerate(String),

    #[error("MCMC diagnostics failed ({sampler}): max split-Rhat {max_rhat:.4}, min ESS {min_ess:.1}, acceptance {acceptance:?}")]
    Diagnostics {
        sampler: String,
        max_rhat: f64,
        min_ess: f64,
        acceptance: Vec<f64>,
    },

    #[error("individual fit failed for patient {patient}: {reason}")]
    FitFailure { patient: usize, reason: String },

    #[error("population estimation infeasible: {0}")]
    EstimationInfeasible(String),

    #[error("hierarchical model undefined: toxic peak does not exceed earlier peaks for patients {patients:?}")]
    ModelInconsistency { patients: Vec<usize> },

    #[error("effective sample size undefined: beta moment matching infeasible at every regimen")]
    EssInfeasible,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "replacement budget exhausted: {failed} failed trials exceed the budget of {budget}; last failure: {last}"
    )]
    ReplacementExhausted { failed: usize, budget: usize, last: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
