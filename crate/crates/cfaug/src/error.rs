use thiserror::Error;

pub type Result<T> = std::result::Result<T, CfaugError>;

#[derive(Debug, Error)]
pub enum CfaugError {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid region: {0}")]
    InvalidRegion(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

impl From<std::io::Error> for CfaugError {
    fn from(e: std::io::Error) -> Self {
        CfaugError::Io(e.to_string())
    }
}
