use thiserror::Error;

/// Errors raised by the graduation toolkit.
#[derive(Debug, Clone, Error)]
pub enum WhError {
    #[error("invalid difference order q={q} for grid length n={n} (need 1 <= q < n)")]
    InvalidOrder { n: usize, q: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pseudo-determinant undefined: every smoothing parameter is zero")]
    UndefinedPdet,

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("no convergence after {iterations} iterations: {reason}{}", lambda_suffix(.lambda))]
    Convergence {
        iterations: usize,
        trace: Vec<f64>,
        lambda: Option<Vec<f64>>,
        reason: String,
    },

    #[error("smoothing parameter selection failed: {0}")]
    SelectionFailure(String),

    #[error("data inconsistency at cell {index}: d = {d} events with zero exposure")]
    DataInconsistency { index: usize, d: f64 },

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("invalid rank reduction: p = {p} is below the penalty order q = {q}")]
    InvalidReduction { p: usize, q: usize },

    #[error("undefined ratio: {0}")]
    Undefined(String),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

fn lambda_suffix(lambda: &Option<Vec<f64>>) -> String {
    match lambda {
        Some(l) => format!(" at lambda = {l:?}"),
        None => String::new(),
    }
}

impl WhError {
    /// Attach the smoothing parameter(s) at which a convergence failure happened.
    pub fn with_lambda(self, lambdas: &[f64]) -> Self {
        match self {
            WhError::Convergence {
                iterations,
                trace,
                reason,
                ..
            } => WhError::Convergence {
                iterations,
                trace,
                lambda: Some(lambdas.to_vec()),
                reason,
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for WhError {
    fn from(e: std::io::Error) -> Self {
        WhError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, WhError>;
