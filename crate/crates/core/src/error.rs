use thiserror::Error;

#[derive(Debug, Error)]
pub enum BilevelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("unsupported capability: {0}")]
    UnsupportedCapability(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("iterates diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BilevelError> = std::result::Result<T, E>;
