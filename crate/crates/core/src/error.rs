use std::path::PathBuf;

/// Errors raised across the library. Each variant maps to one CLI exit code
/// class via [`Error::exit_code`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    /// Teacher and student disagree on tensor widths where features cross
    /// from one head into the other.
    #[error("wiring error at {junction}: expected {expected} channels, got {got}")]
    Wiring {
        junction: String,
        expected: usize,
        got: usize,
    },

    #[error("training diverged: component `{component}` is {value}")]
    Divergence { component: String, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 validation, 2 numerical divergence, 3 wiring/compatibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Io { .. } | Error::Csv(_) => 1,
            Error::Divergence { .. } => 2,
            Error::Wiring { .. } | Error::Checkpoint(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
