use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid density matrix: {0}")]
    InvalidState(String),

    #[error("qubit cap exceeded: {requested} qubits requested, cap is {cap}")]
    QubitCap { requested: usize, cap: usize },

    #[error("invalid qubit index set: {0}")]
    InvalidIndexSet(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible marginals: {0}")]
    InfeasibleMarginals(String),

    #[error("degenerate ground space (spectral gap {gap:e})")]
    DegenerateGroundSpace { gap: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("out-of-order training request: {0}")]
    TrainingOrder(String),
}

pub type Result<T> = std::result::Result<T, Error>;
