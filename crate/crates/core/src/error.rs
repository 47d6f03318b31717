use thiserror::Error;

/// Failures raised by the numerical layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid mismatch between operands")]
    GridMismatch,
    #[error("grid with {0} unknowns is too large for dense operators")]
    DenseIneligible(usize),
    #[error("unknown catalog symbol `{0}`")]
    UnknownSymbol(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("missing derivative information: {0}")]
    MissingDerivative(String),
    #[error("symbol has no principal/lower split")]
    MissingSplit,
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("horizon {requested} exceeds wrap guard {limit}")]
    WrapGuard { requested: f64, limit: f64 },
    #[error("time step {dt} exceeds stability bound {limit}")]
    Stability { dt: f64, limit: f64 },
    #[error("insufficient decay: {0}")]
    Decay(String),
    #[error("picard iteration diverged after {iterations} iterations (last ratio {last_ratio:.3e}); try a shorter horizon")]
    Divergence { iterations: usize, last_ratio: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
