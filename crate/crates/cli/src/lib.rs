//! Command-line companion to `bsr-core`: configuration and plan resolution,
//! checkpoint files, CSV report emission, and the `bsr` binary's commands.

pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod csvio;
pub mod inputs;

use bsr_core::Error;

/// Failure classes with distinct exit codes: bad inputs exit 2, numeric or
/// audit failures exit 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Validation(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numeric(m) => m,
        }
    }
}

impl core::fmt::Display for CliError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.message())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> CliError {
        match e {
            Error::Dimension(_) | Error::Plan(_) | Error::FrozenGradient(_) => {
                CliError::Validation(e.to_string())
            }
            Error::Numeric(_) | Error::RetentionViolation { .. } | Error::Determinism(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

/// Reads a UTF-8 file, attaching the path to any failure.
pub fn read_text(path: &std::path::Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

/// Writes a file, attaching the path to any failure.
pub fn write_file(path: &std::path::Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}
