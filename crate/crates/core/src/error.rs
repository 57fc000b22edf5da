use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio file: {0}")]
    Format(String),
    #[error("unsupported audio encoding: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("implausible array geometry: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("incompatible model: {0}")]
    Compatibility(String),
    #[error("no data: {0}")]
    NoData(String),
    #[error("no estimate: {0}")]
    NoEstimate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
