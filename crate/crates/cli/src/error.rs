use occfield::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Diverged(String),
    #[error("validation: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Diverged(_) => 4,
            CliError::Validation(_) => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Config { .. } | CoreError::UnknownKey { .. } => CliError::Config(msg),
            CoreError::Io(_)
            | CoreError::BadMagic { .. }
            | CoreError::VersionMismatch { .. }
            | CoreError::Truncated(_)
            | CoreError::TrailingBytes(_)
            | CoreError::Malformed(_) => CliError::Io(msg),
            CoreError::Diverged { .. } => CliError::Diverged(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
