use thiserror::Error;

#[derive(Debug, Error)]
pub enum VoltVarError {
    #[error("topology error: {0}")]
    Topology(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("model rejected: {0}")]
    ModelRejected(String),
    #[error("feeder kind mismatch: {0}")]
    Kind(String),
    #[error("degenerate parameterization: {0}")]
    Degenerate(String),
    #[error("did not converge: {0}")]
    Convergence(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VoltVarError>;
