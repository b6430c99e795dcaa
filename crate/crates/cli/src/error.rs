use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },

    #[error(transparent)]
    Core(#[from] deragec::Error),
}

impl CliError {
    /// 1 for usage and configuration problems, 3 for backend or transport
    /// failures, 2 for everything wrong with the data.
    pub fn exit_code(&self) -> i32 {
        use deragec::Error as E;
        match self {
            CliError::Usage(_) | CliError::ConfigFile { .. } => 1,
            CliError::Core(E::Config(_) | E::FilterSpec(_) | E::ZeroK | E::InvalidCosts(_)) => 1,
            CliError::Core(E::Backend(_) | E::Tagger { .. }) => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
