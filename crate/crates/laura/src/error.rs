use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid document {doc_id}: {reason}")]
    InvalidDocument { doc_id: String, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("protocol error from {endpoint}: {reason}")]
    Protocol { endpoint: String, reason: String },

    #[error("service {endpoint} failed after {attempts} attempts: {reason}")]
    Service {
        endpoint: String,
        attempts: u32,
        reason: String,
    },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: usize,
        reason: String,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
