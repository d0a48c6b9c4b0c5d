use thiserror::Error;

#[derive(Debug, Error)]
pub enum TkmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} {context} lies outside the approximation interval [-{bound}, {bound}]")]
    Domain {
        value: f64,
        bound: f64,
        context: String,
    },

    #[error("size limit exceeded: {requested} entries requested, cap is {cap}")]
    SizeLimit { requested: usize, cap: usize },

    #[error("feature map mismatch: {0}")]
    FeatureMapMismatch(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TkmError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        TkmError::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, TkmError>;
