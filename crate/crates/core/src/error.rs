use thiserror::Error;

/// Errors raised across the crate.
///
/// The variants mirror the failure classes of the command-line surface, which
/// maps them onto process exit codes with [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("index error: {0}")]
    Index(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity error: {requested} entries exceeds the materialization cap of {cap}")]
    Capacity { requested: usize, cap: usize },
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte {offset} ({blob}): {reason}")]
    Format {
        offset: u64,
        blob: String,
        reason: String,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, blob: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            blob: blob.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for malformed files,
    /// 4 for numeric failures and 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Vocab(_) => 2,
            Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
