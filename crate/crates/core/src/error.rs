use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid channel class (p={p}, r={r}): {reason}")]
    InvalidClass { p: f64, r: f64, reason: String },

    #[error("invalid class mix: {0}")]
    InvalidMix(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IndexError {
    #[error("relative value iteration did not converge after {iterations} iterations (span {span:e})")]
    NonConvergent { iterations: usize, span: f64 },

    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxedError {
    #[error("alpha {alpha} outside (0, {capacity}]")]
    AlphaOutOfRange { alpha: f64, capacity: f64 },

    #[error("threshold age {age} outside 1..={tau}")]
    BadThresholdAge { age: usize, tau: usize },

    #[error("randomization {0} outside [0, 1]")]
    BadRho(f64),

    #[error("singular belief chain: {0}")]
    SingularChain(String),

    #[error("transient regime: class(es) {silent:?} go silent, no stationary occupancy exists")]
    Transient { silent: Vec<usize> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FluidError {
    #[error("non-generic alpha: fixed point lies on the boundary of the linear region (rho* = {rho})")]
    NonGeneric { rho: f64 },

    #[error("analytic form unavailable: {0}")]
    AnalyticUnavailable(String),

    #[error(transparent)]
    Relaxed(#[from] RelaxedError),

    #[error("state vector has dimension {got}, expected {expected}")]
    Dimension { got: usize, expected: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("{what} = {value} is not an integer for N = {n}")]
    NonIntegral { what: &'static str, value: f64, n: usize },

    #[error("horizon must be at least 1")]
    EmptyHorizon,

    #[error("burn-in {burn_in} must be below horizon {horizon}")]
    BurnIn { burn_in: usize, horizon: usize },

    #[error("explicit initial state: {0}")]
    InitialState(String),

    #[error(transparent)]
    Relaxed(#[from] RelaxedError),

    #[error(transparent)]
    Model(#[from] ModelError),
}
