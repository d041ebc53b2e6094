use thiserror::Error;

/// Errors surfaced by geometry construction, solvers, samplers and estimators.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on parameters or geometry is violated.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A statistic cannot be formed (vanishing variance, near-null conditioning).
    #[error("degenerate instance: {0}")]
    Degenerate(String),

    /// An iterative or direct solve did not reach the requested accuracy.
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// A dense factorization was requested for a domain above the configured cap.
    #[error("domain of {size} vertices exceeds the factorization cap {cap}; use the torus sampler or raise the cap")]
    SizeCap { size: usize, cap: usize },

    /// Curve estimates do not bracket the requested threshold on the given grid.
    #[error("level grid is non-informative: all estimates {} the threshold", if *.all_above { "above" } else { "below" })]
    GridNonInformative { all_above: bool },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
