use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {max_asymmetry:.3e})")]
    NotSymmetric { max_asymmetry: f64 },

    #[error("matrix is not positive definite (lambda_min = {lambda_min:.3e})")]
    NotPositiveDefinite { lambda_min: f64 },

    /// The metric restricted to the horizontal space (or a slice chart) is
    /// singular, which happens off the regular set or with too few samples.
    #[error("singular metric{}: lambda_min = {lambda_min:.3e}", at_time.map(|t| format!(" at t = {t}")).unwrap_or_default())]
    SingularMetric { lambda_min: f64, at_time: Option<f64> },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("training did not reach loss {threshold:.3e} (final loss {final_loss:.6e})")]
    NotConverged { final_loss: f64, threshold: f64 },

    #[error("retry budget exhausted: {0}")]
    RetriesExhausted(String),

    #[error("vanishing hidden weight vector at unit {unit}")]
    VanishingUnit { unit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics themselves (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::SingularMetric { .. }
                | Error::NonFinite { .. }
                | Error::NotConverged { .. }
                | Error::RetriesExhausted(_)
        )
    }
}
