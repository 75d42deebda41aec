use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the command-line front end: 2 for
    /// configuration and contract problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Training { .. } | Error::Oracle(_) => 3,
            _ => 2,
        }
    }

    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Oracle(_) => "oracle",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
