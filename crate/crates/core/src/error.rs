use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes, lengths or ids that do not fit together.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference probe produced a non-finite loss at parameter {group}[{index}]")]
    OracleFailure { group: String, index: usize },

    #[error("gradient check failed for {group}: relative error {rel_err:e}")]
    GradientMismatch { group: String, rel_err: f64 },

    #[error("instance too large for enumeration: T + U = {size} exceeds the guard of {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("non-finite loss for utterance {utterance_id} in epoch {epoch}")]
    NonFiniteLoss { utterance_id: String, epoch: usize },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("error rate undefined: reference corpus has no tokens")]
    UndefinedRate,

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
