use thiserror::Error;

/// Errors raised anywhere in the attribution pipeline.
#[derive(Debug, Error)]
pub enum TdaError {
    #[error("matrix is not symmetric: |m[{row}][{col}] - m[{col}][{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("matrix function is singular at eigenvalue {eigenvalue:e}")]
    Singular { eigenvalue: f64 },

    #[error("capacity exceeded: {what} needs {requested} entries, limit is {limit}{hint}")]
    Capacity {
        what: &'static str,
        requested: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    Overflow(&'static str),

    #[error("training diverged at step {step}: |theta| = {norm:e}")]
    Divergence { step: usize, norm: f64 },

    #[error("unsupported: {0}")]
    Unsupported(&'static str),

    #[error("invalid segment plan: {0}")]
    InvalidPlan(String),

    #[error("score undefined: {0}")]
    Undefined(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TdaError>;

impl TdaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        TdaError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TdaError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TdaError::Singular { .. }
                | TdaError::Overflow(_)
                | TdaError::Divergence { .. }
                | TdaError::NotSymmetric { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, TdaError::Io { .. })
    }
}
