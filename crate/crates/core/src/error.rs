use thiserror::Error;

/// Errors raised anywhere in the quantization / recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {primitive}: {detail}")]
    Shape {
        primitive: &'static str,
        detail: String,
    },
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("strategy error: {0}")]
    Strategy(String),
    #[error("incompatible strategy: {0}")]
    IncompatibleStrategy(String),
    #[error("resource constraint violated: {0}")]
    Resource(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(primitive: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        primitive,
        detail: detail.into(),
    }
}
