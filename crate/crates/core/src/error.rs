use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },

    #[error("unknown token {token:?}{}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    UnknownToken { token: String, line: Option<usize> },

    #[error("cannot segment input at byte offset {offset}")]
    Unsegmentable { offset: usize },

    /// A single (token, feature) cell whose budget is below the feasibility bound.
    #[error(
        "infeasible budget for token {token}, feature {feature}: eps_i = {epsilon} < minimal feasible {minimal}"
    )]
    InfeasibleFeature {
        token: usize,
        feature: usize,
        epsilon: f64,
        minimal: f64,
    },

    /// A whole plan is infeasible; `minimal_total` is the smallest total budget with the
    /// same per-feature split that would make every cell feasible.
    #[error(
        "infeasible budget plan: {violations} (token, feature) cells below the feasibility bound; minimal feasible total eps = {minimal_total}"
    )]
    InfeasibleBudget {
        violations: usize,
        cells: Vec<(usize, usize, f64)>,
        minimal_total: f64,
        minimal_any_split: f64,
    },

    #[error("{what} too large for exact enumeration: {size} > {limit}")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("observed value is unreachable from every token (feature {feature})")]
    ZeroLikelihood { feature: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty sequence")]
    EmptySequence,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated input: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("payload of {size} bytes exceeds the {limit} byte limit")]
    Oversize { size: usize, limit: usize },

    #[error("protocol error ({code:?}): {detail}")]
    Protocol {
        code: crate::protocol::ErrorCode,
        detail: String,
    },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("missing fixture: {0}")]
    MissingFixture(String),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
