use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution parameters: {0}")]
    InvalidDistribution(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("spike gram matrix is singular")]
    SingularGram,

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("{0} requires a distribution with discrete support; use the closed-form Gaussian posterior instead")]
    ContinuousSupport(&'static str),

    #[error("cannot prune the last remaining head")]
    LastHead,

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
