use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes. Part of the command-line contract.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const DIVERGENCE: u8 = 3;
    pub const IO: u8 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("{path}: integrity check failed: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("{path}: checkpoint schema version {found}, this build reads {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },

    /// Stored results disagree with values recomputed from them.
    #[error("{0}")]
    Inconsistent(String),

    #[error(transparent)]
    Core(#[from] cmn_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Core validation errors with a field path become config errors under
    /// `section`.
    pub fn from_core_in(section: &str, err: cmn_core::Error) -> Self {
        match err {
            cmn_core::Error::InvalidField { field, reason } => CliError::config(format!("{section}.{field}"), reason),
            cmn_core::Error::InvalidArgument(m) => CliError::config(section, m),
            other => CliError::Core(other),
        }
    }

    pub fn exit_code(&self) -> u8 {
        use cmn_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Usage(_) => exit::CONFIG,
            CliError::Io { .. } | CliError::Integrity { .. } | CliError::Version { .. } => exit::IO,
            CliError::Inconsistent(_) => exit::FAILURE,
            CliError::Core(e) => match e {
                E::Divergence { .. } => exit::DIVERGENCE,
                E::Io { .. } | E::Csv { .. } => exit::IO,
                E::InvalidField { .. } | E::InvalidArgument(_) | E::Metric(_) | E::LabelOutOfRange { .. } => exit::CONFIG,
                _ => exit::FAILURE,
            },
        }
    }
}
