use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Cholesky of a capacitance matrix failed even after jitter escalation.
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),

    /// Every particle weight underflowed during a measurement update.
    #[error("particle degeneracy at step {step}: {detail}")]
    FilterDegeneracy { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
