use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition (shape, range, empty input).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A covariance could not be factorized even after jitter.
    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    /// A grid map was queried with a subcarrier count it was not fitted for.
    #[error("unknown sensing configuration k={0}")]
    UnknownConfiguration(u32),

    /// Malformed map or sample file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Rejected experiment configuration.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Planning failed at horizon step `tau`.
    #[error("planning step tau={tau}: {source}")]
    Planning {
        tau: usize,
        #[source]
        source: Box<Error>,
    },

    /// A closed-loop episode aborted at `step`.
    #[error("episode step {step}: {source}")]
    Episode {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 configuration or contract, 3 numerical
    /// degeneracy, 4 file access or file content.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Degenerate(_) => 3,
            Error::Io { .. } | Error::Parse { .. } => 4,
            Error::Contract(_) | Error::UnknownConfiguration(_) | Error::Config { .. } => 2,
            Error::Planning { .. } | Error::Episode { .. } => unreachable!("root() unwraps context"),
        }
    }

    /// Innermost error after unwrapping step/tau context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Planning { source, .. } | Error::Episode { source, .. } => source.root(),
            other => other,
        }
    }
}
