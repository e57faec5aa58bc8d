use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("finite-difference order {0} outside supported range 1..=8")]
    UnsupportedOrder(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("window has {got} states, order {order} needs {}", order + 1)]
    WindowLength { order: usize, got: usize },

    #[error("simulation diverged at step {step}")]
    SimulationDiverged { step: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("linear system is singular or ill-conditioned (condition estimate {condition:.3e}, {count} samples)")]
    IllConditioned { condition: f64, count: usize },

    #[error("value function diverges: {0}")]
    DivergentValue(String),

    #[error("rewards misaligned with trajectory {trajectory}: {expected} states, {got} rewards")]
    MisalignedRewards {
        trajectory: usize,
        expected: usize,
        got: usize,
    },

    #[error("unsupported transition law: {0}")]
    UnsupportedTransition(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
