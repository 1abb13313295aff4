use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("positivity violation: weight of bin {bin} is {value}")]
    Positivity { bin: usize, value: f64 },

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("path diverged at step {step}{context}")]
    PathDivergence { step: usize, context: String },

    #[error("misuse: {0}")]
    Misuse(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Picard iteration did not converge (last contraction estimate {rho}, continuation depth {depth})")]
    NonConvergence { rho: f64, depth: usize },

    #[error("step instability: {0}; reduce dt")]
    Unstable(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
