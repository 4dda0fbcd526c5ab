use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("ingestion error at byte {offset}: {message}")]
    Ingest { offset: u64, message: String },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("client shard is empty")]
    EmptyShard,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
