use thiserror::Error;

/// Errors produced by the numeric kernels, the model and the data pipeline.
#[derive(Debug, Error)]
pub enum NcartError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: line {line}, column `{column}`: {message}")]
    Data {
        path: String,
        line: usize,
        column: String,
        message: String,
    },

    #[error("model file: {0}")]
    ModelFile(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = NcartError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> NcartError {
    NcartError::Shape {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
