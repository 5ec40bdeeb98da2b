use thiserror::Error;

/// Errors surfaced by the solver and filter building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// All particle likelihoods underflowed to zero; callers fall back to
    /// uniform weights and flag the step.
    #[error("degenerate likelihood: all particle weights are zero")]
    DegenerateLikelihood,

    /// Riccati integration blew up (finite escape time).
    #[error("Riccati solution norm exceeded {0:.3e} before reaching t = 0")]
    FiniteEscape(f64),

    #[error("non-finite gradient encountered at iteration {0}")]
    NonFiniteGradient(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
