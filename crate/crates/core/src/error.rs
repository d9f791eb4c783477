use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Data => "data",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("simulation diverged at t = {t:.4} s")]
    Diverged { t: f64 },

    #[error("inertia matrix is numerically singular")]
    SingularInertia,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("all {num_robots} robots were blacklisted (dominant violation: {dominant})")]
    EmptyDataset { num_robots: usize, dominant: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Unsupported(_) | Error::Dimension { .. } => {
                ErrorCategory::Config
            }
            Error::Diverged { .. }
            | Error::SingularInertia
            | Error::NonFinite(_)
            | Error::Shape { .. } => ErrorCategory::Numeric,
            Error::EmptyDataset { .. }
            | Error::Data(_)
            | Error::Format(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Io(_)
            | Error::Json(_) => ErrorCategory::Data,
        }
    }
}
