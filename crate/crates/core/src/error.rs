use std::path::PathBuf;

/// Errors raised anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss for model `{model}` at epoch {epoch}, step {step}")]
    NonFiniteLoss { model: String, epoch: usize, step: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("schema mismatch for tensor `{tensor}`: {detail}")]
    Schema { tensor: String, detail: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("alpha calibration failed: {0}")]
    Calibration(String),

    #[error("epoch schedule infeasible after {attempts} relaxations: {history}")]
    ScheduleInfeasible { attempts: usize, history: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
