use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {message}")]
    Header { path: PathBuf, message: String },

    #[error("unsupported dtype {0:?} (only \"f32\" is supported)")]
    UnsupportedDtype(String),

    #[error("payload length mismatch in {path}: header implies {expected} bytes, found {actual}")]
    LengthMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("grid {index} is not aligned with grid 0: {detail}")]
    Misaligned { index: usize, detail: String },

    #[error("unknown label code {code} at row {row}, col {col}")]
    UnknownLabel { code: i64, row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable code, used as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Header { .. } => "header",
            Error::UnsupportedDtype(_) => "unsupported_dtype",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Misaligned { .. } => "misaligned",
            Error::UnknownLabel { .. } => "unknown_label",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Json(_) => "json",
        }
    }

    /// True for failures caused by bad inputs rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
