use thiserror::Error;

/// Errors raised anywhere in the model, data and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("token id {id} out of vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (batch {batch:?})")]
    NonFinite { step: usize, batch: Vec<String> },

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable short identifier, used by the CLI for machine-readable errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::Degenerate(_) => "degenerate",
            Error::Contract(_) => "contract",
            Error::Generation(_) => "generation",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite { .. } => "non_finite",
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
