use thiserror::Error;

#[derive(Debug, Error)]
pub enum DishftError {
    #[error(transparent)]
    Tensor(#[from] ndgrad::NdError),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("symbol `{0}` has no industry tag")]
    MissingIndustry(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, DishftError>;
