use thiserror::Error;

/// Errors raised by the numeric kernels, the model and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} has every entry masked")]
    DegenerateRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("inconsistent decode state: {0}")]
    State(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("kl divergence undefined: q[{index}] is zero where p[{index}] is positive")]
    Support { index: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Training { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
