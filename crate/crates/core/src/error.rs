use thiserror::Error;

/// Errors raised across the beam-training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("rank-deficient equivalent channel (condition estimate {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("singular Gram matrix (log10 |det| = {log10_det:.3})")]
    Singular { log10_det: f64 },

    #[error("sum rate undefined: {0}")]
    RateUndefined(String),

    #[error("search space of {count} candidates exceeds budget {budget}")]
    BudgetExceeded { count: u128, budget: u64 },

    #[error("labeler refused sample {index}: {source}")]
    Labeler {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
