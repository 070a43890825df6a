use san_core::Error as CoreError;

/// Exit status for successful runs.
pub const EXIT_OK: i32 = 0;
/// A check ran and failed (gradient check, benchmark sanity, training divergence).
pub const EXIT_VERIFY: i32 = 1;
/// Bad flags or out-of-range settings.
pub const EXIT_USAGE: i32 = 2;
/// Unreadable or malformed input files.
pub const EXIT_INPUT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Verify(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Range(_) | CoreError::Capacity(_) => EXIT_USAGE,
                CoreError::Format(_)
                | CoreError::Input(_)
                | CoreError::Io(_)
                | CoreError::Json(_)
                | CoreError::Shape(_)
                | CoreError::Support { .. }
                | CoreError::DegenerateRow { .. } => EXIT_INPUT,
                CoreError::Training { .. } | CoreError::State(_) => EXIT_VERIFY,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
