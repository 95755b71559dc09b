//! Command line tools and the HTTP inference service.

pub mod commands;
pub mod curves;
pub mod engine;
pub mod service;

/// Process exit status for a failed command: 2 usage, 3 data, 4 runtime.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<fundus_core::Error> for CliError {
    fn from(e: fundus_core::Error) -> Self {
        use fundus_core::Error as E;
        match e {
            E::InvalidArgument(_) | E::InvalidConfig(_) => CliError::Usage(e.to_string()),
            e if e.is_data_error() => CliError::Data(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}
