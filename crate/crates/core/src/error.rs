use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI's categorized exit
/// codes: config 2, I/O 3, contract 4, divergence 5.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label mapping error: raw id {0} has no mapping and no default ignore id")]
    Mapping(u16),

    #[error("divergence: {0}")]
    Divergence(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit status associated with this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::Contract(_) | Error::Mapping(_) => 4,
            Error::Divergence(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
