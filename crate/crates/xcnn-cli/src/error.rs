//! Process-level error classes; each maps to one documented exit code.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// exit 2: configuration, data layout, or argument problems
    Config(String),
    /// exit 3: training started but could not finish
    Training(String),
    /// exit 4: checkpoint unreadable, corrupt, or incompatible
    Checkpoint(String),
    /// exit 5: the input image cannot be read or decoded
    Image(String),
    /// exit 6: a command needs artifacts that are not in the run directory
    MissingArtifacts(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Image(_) => 5,
            CliError::MissingArtifacts(_) => 6,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Training(m) => write!(f, "training aborted: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            CliError::Image(m) => write!(f, "input image error: {m}"),
            CliError::MissingArtifacts(names) => {
                write!(f, "missing artifacts: {}", names.join(", "))
            }
        }
    }
}

impl std::error::Error for CliError {}

/// Shorthand for the pervasive "this makes the run unconfigurable" case.
pub fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}
