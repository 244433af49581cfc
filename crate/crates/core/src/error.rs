use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("empty supervision: no target position is selected")]
    EmptySupervision,

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("tape already consumed by a backward pass")]
    TapeReuse,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),

    #[error("non-finite values in tensor data")]
    NonFiniteTensor,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid tuning location: {0}")]
    Location(String),

    #[error("sequence of length {len} exceeds context window {max}")]
    Length { len: usize, max: usize },

    #[error("fact world generation: {0}")]
    Generation(String),

    #[error("edit sampling: {0}")]
    Sampling(String),

    #[error("sharding: {0}")]
    Shard(String),

    #[error("edit stream: {0}")]
    Stream(String),

    #[error("pipeline configuration: {0}")]
    Pipeline(String),

    #[error("sweep: {0}")]
    Sweep(String),

    #[error("location selection: {0}")]
    Selection(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape {
        op,
        detail: detail.into(),
    })
}
