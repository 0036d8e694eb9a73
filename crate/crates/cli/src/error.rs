use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or missing inputs (exit 2).
    #[error("{0}")]
    Usage(String),
    /// A failure while running (exit 1).
    #[error(transparent)]
    Runtime(#[from] itn_core::Error),
    /// Gradient checks that did not pass (exit 1).
    #[error("gradient check failed for: {}", .0.join(", "))]
    GradCheck(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::GradCheck(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
