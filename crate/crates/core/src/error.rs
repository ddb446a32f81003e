use thiserror::Error;

/// Errors raised by controllers, solvers and estimators in this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("trajectory diverged at step {step}: non-finite state")]
    Diverged { step: usize },

    #[error("partition function is not finite ({what})")]
    DivergingMechanism { what: String },

    #[error("Monte Carlo estimate unreliable: effective sample size {ess:.2} < {min}")]
    UnreliableEstimate { ess: f64, min: f64 },

    #[error("ill-conditioned problem at step {step}: condition number {condition:.3e}")]
    IllConditioned { step: usize, condition: f64 },

    #[error("matrix is not positive definite: {what}")]
    NotPositiveDefinite { what: String },

    #[error("all importance weights are zero ({n_samples} samples); increase samples or widen the prior")]
    InfeasibleProposal { n_samples: usize },

    #[error("non-finite gradient for particle {particle} at iteration {iteration}")]
    NonFiniteGradient { particle: usize, iteration: usize },

    #[error("step size halved {halvings} times at iteration {iteration} without reducing the objective")]
    StepSizeExhausted { iteration: usize, halvings: usize },

    #[error("too few samples: {got} < {min}")]
    TooFewSamples { got: usize, min: usize },

    #[error("all bounds on the grid are infinite; extend the beta grid toward 0")]
    AllBoundsInfinite,

    #[error("policy does not expose an evaluable density")]
    UnsupportedPolicy,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
