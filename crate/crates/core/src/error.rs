use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants map onto the CLI exit codes: configuration problems exit
/// with 2, numeric aborts with 3 and I/O failures with 4.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke an API contract (mismatched lengths, stale tape, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared during a computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training or distillation stopped because it could not make progress.
    #[error("numeric abort: {0}")]
    Abort(String),

    /// Rejection sampling ran out of attempts.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Invalid configuration or input file content.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint, image or other binary container.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Contract(_) => 2,
            Error::Numeric(_) | Error::Abort(_) | Error::Sampling(_) => 3,
            Error::Io { .. } | Error::Format(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
