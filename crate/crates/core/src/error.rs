use std::path::PathBuf;

use thiserror::Error;

use crate::flanp::Trace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("loss is not strongly convex (mu = {mu:e})")]
    NotStronglyConvex { mu: f64 },

    #[error("singular system in optimum oracle")]
    Singular,

    #[error("newton solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NewtonNonConvergence { iterations: usize, grad_norm: f64 },

    #[error("step too large: non-finite iterate at node {node} in round {round}")]
    Diverged { round: usize, node: usize },

    #[error("stage with {stage_n} participants exceeded {max_rounds} rounds")]
    StageBudgetExceeded {
        stage_n: usize,
        max_rounds: usize,
        partial: Box<Trace>,
    },

    /// A run failed mid-way; `partial` holds the rounds completed so far.
    #[error("{source}")]
    RunAborted {
        #[source]
        source: Box<Error>,
        partial: Box<Trace>,
    },

    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("{path}: no rows")]
    NoRows { path: PathBuf },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// The trace recorded before a run failed, if any.
    pub fn partial_trace(&self) -> Option<&Trace> {
        match self {
            Error::StageBudgetExceeded { partial, .. } | Error::RunAborted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}
