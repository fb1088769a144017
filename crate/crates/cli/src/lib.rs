//! Configuration and stage runners behind the `crimemap` binary.

pub mod config;
pub mod pipeline;

use std::fmt;

/// Failure classes, mapped to process exit codes 1 and 2.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, arguments or input data.
    Invalid(String),
    /// I/O, network, training or other runtime failure.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}
