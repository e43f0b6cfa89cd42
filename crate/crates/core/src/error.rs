use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("linear system is singular or ill-conditioned: {0}")]
    Singular(String),

    #[error("correction infeasible: beta {beta} exceeds the attainable cap {cap} with {records} calibration records")]
    InfeasibleCorrection { beta: f64, cap: f64, records: usize },

    #[error("insufficient calibration data for (delta={delta}, epsilon={epsilon}): {reason}")]
    InsufficientCalibration { delta: f64, epsilon: f64, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
