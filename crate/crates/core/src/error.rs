use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("metric is not symmetric positive definite at x = {coord:?}")]
    MetricNotSpd { coord: Vec<f64> },
    #[error("damping coefficient is negative ({value}) at x = {coord:?}")]
    NegativeDamping { coord: Vec<f64>, value: f64 },
    #[error("first-order term fails the symmetry audit (defect {defect:.3e})")]
    AsymmetricFirstOrder { defect: f64 },
    #[error("Krylov solve did not converge: best relative residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },
    #[error("time step {step} increased the norm by a factor {growth:.3e}")]
    NormGrowth { step: usize, growth: f64 },
    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: usize },
    #[error("decay fit needs at least 8 points in the window, got {0}")]
    TooFewPoints(usize),
    #[error("{0}")]
    Unsupported(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
