use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix is not positive definite (last jitter tried: {jitter:e})")]
    Decomposition { jitter: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },

    #[error("gradient for parameter `{param}` contains NaN; update rejected")]
    NanGradient { param: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("drift produced a non-finite value for object {object}")]
    Drift { object: usize },

    #[error("integration produced a non-finite state at substep {step}")]
    Integration { step: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
