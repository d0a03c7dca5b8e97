use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Error)]
pub enum GimError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("stack boundary between module {left} and module {right}: {msg}")]
    StackBoundary {
        left: usize,
        right: usize,
        msg: String,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config {key} (line {line}): {msg}")]
    Config {
        key: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: dimensions overflow the addressable size")]
    DimOverflow { path: PathBuf },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("schedule: {0}")]
    Schedule(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GimError {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            GimError::ShapeMismatch { .. } => "shape_mismatch",
            GimError::InvalidArgument { .. } => "invalid_argument",
            GimError::StackBoundary { .. } => "stack_boundary",
            GimError::NonFinite(_) => "non_finite",
            GimError::Config { .. } => "config",
            GimError::BadMagic { .. } => "bad_magic",
            GimError::Truncated { .. } => "truncated",
            GimError::DimOverflow { .. } => "dim_overflow",
            GimError::Format { .. } => "format",
            GimError::Schedule(_) => "schedule",
            GimError::Io(_) => "io",
            GimError::Json(_) => "json",
        }
    }

    /// Whether the error rejects user input (config, arguments, files) rather
    /// than a failure during computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            GimError::NonFinite(_) | GimError::Schedule(_) | GimError::Io(_) | GimError::Json(_)
        )
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        GimError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GimError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = GimError> = std::result::Result<T, E>;
