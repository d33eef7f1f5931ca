//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is rank deficient (sigma_min/sigma_max = {ratio:.3e})")]
    SingularMatrix { ratio: f64 },

    #[error("degenerate codeword: pre-normalization norm {norm:.3e} is below 1e-30")]
    DegenerateCodeword { norm: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ppm parse error at byte {offset}: {message}")]
    PpmParse { offset: usize, message: String },

    #[error("checkpoint decode error: {0}")]
    CheckpointDecode(String),

    #[error("session error: {0}")]
    Session(String),

    #[error("wire schema violation: {0}")]
    Schema(String),

    #[error("judge unavailable after retries: {0}")]
    JudgeUnavailable(String),

    #[error("generator unavailable after retries: {0}")]
    GenerationUnavailable(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
