use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluteError {
    /// Shapes, bit widths, tilings or flags that the model does not support.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data (non-finite weights, out-of-range values, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed binary file.
    #[error("parse error at byte {offset} ({section}): {message}")]
    Parse {
        offset: usize,
        section: &'static str,
        message: String,
    },

    #[error("optimization diverged at step {step}: loss = {loss}")]
    Optimization { step: usize, loss: f64 },

    #[error("worker {worker} failed: {message}")]
    Execution { worker: usize, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FluteError {
    fn from(e: std::io::Error) -> Self {
        FluteError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FluteError>;
