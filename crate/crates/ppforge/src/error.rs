use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("unresolved relation name `{0}`")]
    Unresolved(String),
    #[error("internal check failed: {0}")]
    Internal(String),
    #[error("{0}")]
    Io(String),
}

impl Error {
    pub fn pre(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn budget(msg: impl Into<String>) -> Self {
        Error::Budget(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Budget(_) => 3,
            Error::Internal(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
