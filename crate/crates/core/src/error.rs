use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("loss is empty: every target position is ignored")]
    EmptyLoss,
    #[error("backward already ran on this tape; call zero_grad before running it again")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),
    #[error("context overflow: {0}")]
    ContextOverflow(String),
    #[error("LoRA adapters already injected")]
    DoubleInjection,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
