use std::path::PathBuf;

/// Errors raised across the toolkit.
///
/// Variants are grouped by how the CLI reports them: configuration
/// problems, backend outages and contract violations each map to their own
/// process exit code (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("backend `{backend}` unreachable: {message}")]
    Unavailable { backend: String, message: String },

    #[error("backend `{0}` cannot provide gradients")]
    GradientUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("malformed {what}: {message}")]
    Decode { what: &'static str, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn backend(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            message: message.into(),
        }
    }

    pub fn unavailable(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Unavailable {
            backend: backend.into(),
            message: message.into(),
        }
    }

    pub fn decode(what: &'static str, message: impl std::fmt::Display) -> Self {
        Error::Decode {
            what,
            message: message.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 backend outage, 4 contract
    /// violation, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Backend { .. } | Error::Unavailable { .. } | Error::GradientUnavailable(_) => 3,
            Error::Contract(_) => 4,
            _ => 1,
        }
    }

    /// The backend could not be reached at all; the run should stop.
    pub fn is_backend_outage(&self) -> bool {
        matches!(self, Error::Unavailable { .. })
    }

    /// Any backend-side failure, reachable or not.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, Error::Backend { .. } | Error::Unavailable { .. })
    }
}
