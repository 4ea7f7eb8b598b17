use thiserror::Error;

pub type Result<T, E = NlfbError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlfbError {
    /// Invalid parameters, mismatched grids, malformed input files.
    #[error("configuration error: {0}")]
    Config(String),
    /// A geometric precondition failed (empty ball, coincident points, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Field or sample data unusable for the requested operation.
    #[error("data error: {0}")]
    Data(String),
    #[error("solver error: {message} (last relative residual {residual:e})")]
    Solver { message: String, residual: f64 },
    #[error("capacity error: {0}")]
    Capacity(String),
}

impl NlfbError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        NlfbError::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        NlfbError::Domain(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        NlfbError::Data(msg.into())
    }
}
