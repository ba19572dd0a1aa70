use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Nn(#[from] nnkit::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
