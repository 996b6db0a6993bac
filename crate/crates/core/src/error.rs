use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the process exit code the CLI maps them to
/// (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("truncated data region: tensor `{name}` ends at byte {end} but data region has {available} bytes")]
    Truncated { name: String, end: u64, available: u64 },

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("tensor `{name}` has dtype {dtype}, which does not support arithmetic")]
    UnsupportedDtype { name: String, dtype: String },

    #[error("tensor `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("tensor `{0}` is missing")]
    MissingTensor(String),

    #[error("tensor `{name}`: dtype {left} does not match {right}")]
    DtypeMismatch { name: String, left: String, right: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("recipe validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("evaluator failed: {0}")]
    Evaluator(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(name: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            name: name.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 validation, 3 I/O and file format, 4 evaluator,
    /// 5 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
            Error::Io { .. }
            | Error::MalformedHeader(_)
            | Error::Truncated { .. }
            | Error::DuplicateTensor(_)
            | Error::UnknownTensor(_)
            | Error::UnsupportedDtype { .. }
            | Error::ShapeMismatch { .. }
            | Error::MissingTensor(_)
            | Error::DtypeMismatch { .. } => 3,
            Error::Evaluator(_) => 4,
            Error::Invariant(_) => 5,
        }
    }

    /// Short machine-readable category name, used in JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed_header",
            Error::Truncated { .. } => "truncated",
            Error::DuplicateTensor(_) => "duplicate_tensor",
            Error::UnknownTensor(_) => "unknown_tensor",
            Error::UnsupportedDtype { .. } => "unsupported_dtype",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::MissingTensor(_) => "missing_tensor",
            Error::DtypeMismatch { .. } => "dtype_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Validation(_) => "validation",
            Error::Evaluator(_) => "evaluator",
            Error::Invariant(_) => "invariant",
            Error::Json(_) => "json",
        }
    }
}
