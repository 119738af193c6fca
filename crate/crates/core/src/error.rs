use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("bad data: {0}")]
    Data(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("malformed container at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("no stored embedding for text hash {hash}")]
    Lookup { hash: String },

    #[error("line {line}: {msg}")]
    Load { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    /// Process exit code for the CLI: 1 for usage/config/state problems,
    /// 2 for anything wrong with input data or stored artifacts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dim { .. }
            | Error::Config(_)
            | Error::Usage(_)
            | Error::Training(_)
            | Error::State(_) => 1,
            Error::Data(_)
            | Error::Format { .. }
            | Error::Lookup { .. }
            | Error::Load { .. }
            | Error::Io(_) => 2,
        }
    }
}
