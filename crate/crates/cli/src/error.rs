use ghvae_core::error::Error as CoreError;

/// Exit code for bad input: configs, missing prerequisites, corrupt files.
pub const EXIT_INVALID: i32 = 1;
/// Exit code for failures while doing otherwise valid work.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::InvalidLadder(_)
                | CoreError::UnknownTask(_)
                | CoreError::Format { .. }
                | CoreError::HashMismatch { .. }
                | CoreError::Data(_)
                | CoreError::Json(_) => EXIT_INVALID,
                _ => EXIT_RUNTIME,
            },
        }
    }
}

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}
