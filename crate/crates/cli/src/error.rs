use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad file, unknown key, invalid value or violated invariant.
    #[error("{0}")]
    Config(String),
    /// Anything that fails after the configuration was accepted.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<fedmask::Error> for CliError {
    fn from(e: fedmask::Error) -> Self {
        match e {
            fedmask::Error::Config(_) | fedmask::Error::Parse(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
