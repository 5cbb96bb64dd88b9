use thiserror::Error;

use crate::rearrange::RearrangementResult;

/// Crate-wide error type. Engine failures that carry partial output keep it
/// inline so callers can inspect how far a run got.
#[derive(Debug, Error)]
pub enum Error {
    #[error("series has no tail-bound oracle")]
    MissingOracle,

    #[error("series carries no potential-conditional-convergence certificate (pass --assume-pcc to override)")]
    NotPcc,

    #[error("restriction to A carries no conditional-convergence certificate (pass --assume-cc to override)")]
    NotConditionallyConvergentOnA,

    #[error("stage {stage} exceeded the term budget of {budget}")]
    StageBudgetExceeded {
        stage: usize,
        budget: u64,
        partial: Box<RearrangementResult>,
    },

    #[error("block {block} exceeded the term budget of {budget}")]
    BlockBudgetExceeded { block: usize, budget: u64 },

    #[error("permutation prefix cannot be extended to cover position {0}")]
    InsufficientDomain(u64),

    #[error("source series is not conditionally convergent")]
    NonCcSource,

    #[error("index set is exhausted at ordinal {0}")]
    ExhaustedSet(u64),

    #[error("invalid quotient map: {0}")]
    InvalidQuotientMap(String),

    #[error("rearrangement result has no checkpoints")]
    EmptyResult,

    #[error("selector is not strictly increasing at n={0}")]
    NonMonotoneSelector(u64),

    #[error("input must be nonempty")]
    EmptyInput,

    #[error("arithmetic modes differ: {0}")]
    ModeMismatch(&'static str),

    #[error("{0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
