use thiserror::Error;

use crate::geometry::Provenance;

/// Errors raised by the planning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no sample size below {cap} satisfies epsilon({support}) <= {epsilon}")]
    SampleSizeCapExceeded { epsilon: f64, support: usize, cap: usize },

    #[error("degenerate direction: linearization point coincides with obstacle position")]
    DegenerateDirection,

    #[error("empty free-space polytope; blocking constraints: {blocking:?}")]
    EmptyPolytope { blocking: Vec<Provenance> },

    #[error("infeasible QP; conflicting inequality rows: {conflict:?}")]
    InfeasibleQp { conflict: Vec<usize> },

    #[error("QP solver failure: {0}")]
    QpFailure(String),

    #[error("subproblem solver failed in iteration {iteration}: {source}")]
    Subproblem {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
