use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("noise levels out of order: sigma_prev={sigma_prev} must be below sigma_t={sigma_t}")]
    Ordering { sigma_t: f64, sigma_prev: f64 },

    #[error("integration failure: non-finite state at sigma={sigma}")]
    IntegrationFailure { sigma: f64 },

    #[error("invalid target: {0}")]
    Target(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("solver {solver} diverged at step {step}")]
    Divergence { solver: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::Shape { expected, got })
        }
    }
}
