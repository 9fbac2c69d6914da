use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure classes
/// the library distinguishes: shape problems, numeric degeneracy, broken
/// call contracts, bad token ids, bad configuration, malformed files,
/// checkpoint/architecture mismatches and data generation failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("architecture error: {0}")]
    Architecture(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
