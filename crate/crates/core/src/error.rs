//! One error type for the whole crate, split by failure class so callers
//! (notably the CLI) can map each class to a distinct exit code.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement. Always names both offending shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Out-of-range lookup (vocabulary id, step index, node id).
    #[error("index out of range: {0}")]
    Index(String),

    /// Malformed or inconsistent input data (cohort files, CSV rows).
    #[error("data error: {0}")]
    Data(String),

    /// Schema problems: missing columns, unknown keys, bad field values.
    #[error("schema error: {0}")]
    Schema(String),

    /// Invalid configuration (file contents or programmatic settings).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values encountered during training or inference.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// Checkpoint does not match the receiving model's parameter shapes.
    #[error("transfer mismatch in parameters: {}", .0.join(", "))]
    Transfer(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    /// 1 = data, 2 = config/usage, 3 = numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Schema(_) | Error::Io(_) | Error::Index(_) => 1,
            Error::Config(_) | Error::Dim(_) | Error::Transfer(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}
