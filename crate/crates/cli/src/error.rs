// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("invalid config file: {0}")]
    ConfigFile(#[from] toml::de::Error),

    #[error(transparent)]
    Core(#[from] latentscm::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const INTERNAL: u8 = 4;

    pub fn exit_code(&self) -> u8 {
        use latentscm::Error as E;
        match self {
            CliError::Usage(_) | CliError::ConfigFile(_) => Self::USAGE,
            CliError::Core(E::Config(_) | E::Argument(_)) => Self::USAGE,
            CliError::Core(_) => Self::DATA,
            CliError::Internal(_) => Self::INTERNAL,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
