use std::fmt;

/// Command failures grouped by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    /// A prerequisite artifact is missing or the output directory is locked.
    Dependency(String),
    Integrity(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Integrity(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Dependency(m) => write!(f, "dependency error: {m}"),
            CliError::Integrity(m) => write!(f, "data integrity error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ecg_mllm::error::Error> for CliError {
    fn from(e: ecg_mllm::error::Error) -> Self {
        use ecg_mllm::error::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Data(_) | E::Integrity(_) | E::Checkpoint(_) | E::Json(_) | E::UndefinedAuc(_) => CliError::Integrity(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
