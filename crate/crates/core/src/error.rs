use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file error: {0}")]
    ModelFile(String),
    #[error("bad magic: not a model file")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    BadVersion(u32),
    #[error("truncated model file (needed {0} more bytes)")]
    Truncated(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
