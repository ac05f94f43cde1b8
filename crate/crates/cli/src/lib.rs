//! Command-line front end for stint planning: batch commands that write
//! result files and a JSON-lines session server.

pub mod commands;
pub mod config;
pub mod serve;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] stint_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// Process exit code: 2 when the problem has no solution, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_infeasible() => 2,
            _ => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Core(stint_core::Error::AllMapsInfeasible).exit_code(), 2);
        assert_eq!(CliError::Core(stint_core::Error::InfeasibleBoundary("x".into())).exit_code(), 2);
        assert_eq!(CliError::Core(stint_core::Error::InvalidInput("x".into())).exit_code(), 1);
        assert_eq!(CliError::Config("x".into()).exit_code(), 1);
        assert_eq!(CliError::Runtime("x".into()).exit_code(), 1);
    }
}
