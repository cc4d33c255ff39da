use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: coarse = {coarse}, refine = {refine} (both must be at least 2)")]
    InvalidGrid { coarse: usize, refine: usize },
    #[error("invalid boundary classification: {0}")]
    Boundary(String),
    #[error("edge {0} is not in E_H")]
    InvalidEdge(usize),
    #[error("empty degree-of-freedom set")]
    EmptyDofSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("singular system ({context}): {detail}")]
    Singular { context: String, detail: String },
    #[error("Gram matrix is not positive definite after regularization ({0})")]
    IllConditionedGram(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("basis cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Errors caused by the input rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidGrid { .. }
                | Error::Boundary(_)
                | Error::InvalidEdge(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
