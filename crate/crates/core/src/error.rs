use std::path::PathBuf;

/// Errors produced by the merging library.
///
/// Variants are grouped by the CLI exit code they map to (see [`Error::exit_code`]).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file does not conform to its container format.
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    /// Checkpoints or task vectors do not share one tensor schema.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Invalid configuration or argument values.
    #[error("config error: {0}")]
    Config(String),

    #[error("unknown task `{label}`; available tasks: {}", available.join(", "))]
    UnknownTask { label: String, available: Vec<String> },

    #[error("base fingerprint mismatch: bundle expects {expected}, base has {actual}")]
    FingerprintMismatch { expected: String, actual: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }

    pub(crate) fn alignment(msg: impl Into<String>) -> Self {
        Error::Alignment(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the `emr` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownTask { .. } => 2,
            Error::Alignment(_) => 3,
            Error::Io { .. } | Error::Format { .. } => 4,
            Error::FingerprintMismatch { .. } => 5,
        }
    }
}
