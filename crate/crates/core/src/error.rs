use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Row `0` has (numerically) zero Euclidean norm, so cosine similarity is undefined.
    #[error("token {0} has zero norm")]
    ZeroNormToken(usize),
    #[error("invalid group schedule: {0}")]
    InvalidSchedule(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid token sequence: {0}")]
    InvalidTokens(&'static str),
    #[error("bad architecture: {0}")]
    BadArch(&'static str),
    #[error("keep count {keep} exceeds token count {n}")]
    BadKeepCount { keep: usize, n: usize },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
}
