use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {context} at sample {sample}")]
    Numeric { context: &'static str, sample: usize },

    #[error("divergence: client {client} of silo {silo} produced a non-finite parameter at iteration {iteration}")]
    Divergence {
        client: usize,
        silo: usize,
        iteration: u64,
    },

    #[error("trace is missing {0}")]
    MissingTrace(&'static str),

    #[error("malformed dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Parameters or values derived from them left the finite range.
    /// Datasets are checked for finiteness on load, so a numeric error
    /// during training always comes from the model.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Numeric { .. })
    }
}
