use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("quadrature did not converge for `{integrand}` on [{lo}, {hi}] (tol {tol})")]
    Quadrature {
        integrand: String,
        lo: f64,
        hi: f64,
        tol: f64,
    },

    #[error("non-finite value in path {path} at step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("non-finite input at index {0}")]
    NonFiniteInput(usize),

    #[error("sample size {got} below minimum {min} for basis dimension {dim}")]
    SampleSize { got: usize, min: usize, dim: usize },

    #[error(
        "implicit step did not converge at node {node} after {iters} iterations; \
         use a larger n so that K*dt < 1"
    )]
    FixedPoint { node: usize, iters: usize },

    #[error("weight exponent {log_weight} exceeds overflow guard on interval {interval}")]
    WeightOverflow { interval: usize, log_weight: f64 },

    #[error("inputs are not coupled: {0}")]
    Uncoupled(String),

    #[error("rate fit needs at least 3 strictly positive points, got {0}")]
    RateFit(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt path dump: {0}")]
    Dump(String),
}
