use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A non-finite loss value observed while estimating a gradient.
    /// `direction` is `None` for the unperturbed evaluation.
    #[error("non-finite loss value at direction {direction:?}")]
    NonFiniteLoss { direction: Option<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("capacity error: {target_labels} target labels x {mapping_size} sources exceeds {source_labels} source labels")]
    Capacity {
        source_labels: usize,
        target_labels: usize,
        mapping_size: usize,
    },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("query budget exceeded: {requested} more queries would pass the limit ({spent} spent, {limit})")]
    BudgetExceeded {
        spent: u64,
        requested: u64,
        limit: String,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("remote oracle rejected request with status {status}: {message}")]
    Remote { status: u16, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether retrying the same request could succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}
