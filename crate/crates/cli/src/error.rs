use shd_core::ShdError;

/// Exit code 2: usage, configuration or input-format problems.
pub const EXIT_USAGE: i32 = 2;
/// Exit code 3: numeric failure (divergence, non-finite values, oracle violation).
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub(crate) fn io(what: &str, path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{what} {}: {e}", path.display()))
    }
}

impl From<ShdError> for CliError {
    fn from(e: ShdError) -> Self {
        match e {
            ShdError::NonFinite { .. } | ShdError::Divergence { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}
