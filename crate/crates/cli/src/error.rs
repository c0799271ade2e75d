use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] omnidistill::Error),

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(omnidistill::Error::InvalidArgument(_)) => 1,
            CliError::Core(_) | CliError::Io(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}
