use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The state left the finite range (non-finite or `‖x‖∞ > 1e9`).
    #[error("integration blow-up at step {step} (|x|_inf = {norm})")]
    IntegrationBlowup { step: usize, norm: f64 },

    /// A reciprocal barrier was evaluated outside the interior of its safe set.
    #[error("barrier evaluated outside the safe-set interior (h = {value})")]
    Boundary { value: f64 },

    #[error("no relative degree: a^T F^l G vanishes for every l < {n}")]
    NoRelativeDegree { n: usize },

    #[error("estimator configuration: {0}")]
    EstimatorConfig(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("no closed-form shrink for this safety function; supply hbar_gamma explicitly")]
    UnsupportedShrink,

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("missing context field `{0}`")]
    MissingContext(&'static str),

    #[error("non-finite constraint coefficients")]
    NonFiniteConstraint,

    #[error("quadratic program solver failed: {0}")]
    Solver(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Config(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
