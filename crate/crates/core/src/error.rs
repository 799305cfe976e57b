use thiserror::Error;

/// Errors produced by the safeshield pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown dynamics model `{0}`")]
    UnknownDynamics(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus failed validation: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("nothing to learn: corpus has neither safe nor unsafe points")]
    NothingToLearn,

    #[error("objective Hessian is not positive semidefinite after jitter")]
    NotPsd,

    #[error("QP solver failed: {0}")]
    Solver(String),

    #[error("could not generate a {class} demonstration within {attempts} attempts")]
    Generation { class: &'static str, attempts: usize },

    #[error("unsupported schema_version {0}")]
    SchemaVersion(u64),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
