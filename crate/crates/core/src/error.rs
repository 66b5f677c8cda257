use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),

    #[error("non-finite value in `{entry}`")]
    NonFinite { entry: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("CTC infeasible: {frames} frames cannot align {required} required labels")]
    Infeasible { frames: usize, required: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures caused by arithmetic (divergence, NaN, infeasible alignment).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Infeasible { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
