use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label distribution: {0}")]
    InvalidDistribution(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: unmapped label value {raw}")]
    UnmappedLabel {
        path: PathBuf,
        line: usize,
        raw: String,
    },

    #[error("{path}:{line}: missing field `{key}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        key: String,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateRecord(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("transport failure calling {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("backend error ({status}): {message}")]
    Backend { status: u16, message: String },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("generator returned no candidates")]
    EmptyGeneration,

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("support violation: Q({label}) = 0 but P({label}) > 0")]
    SupportViolation { label: &'static str },

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("incomplete annotation overlap: {0}")]
    IncompleteOverlap(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("missing stage input {path} (run `{stage}` first)")]
    MissingInput { stage: String, path: PathBuf },

    #[error("consistency violation: {0}")]
    Consistency(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown format `{0}`")]
    UnknownFormat(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any [`Error::Context`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Whether a retry of the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        match self.root() {
            Error::Transport { .. } | Error::EmptyGeneration => true,
            Error::Backend { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn with_context<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn with_context<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
