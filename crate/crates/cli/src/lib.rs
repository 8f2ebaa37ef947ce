//! Library side of the `mpctune` command: configuration, presets and the
//! three subcommands.

pub mod commands;
pub mod config;

use mpctune_core::sim::ParamVector;

/// Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub const PRESETS: [&str; 3] = ["default", "vanilla-bo", "saasbo"];

/// Published parameter sets: defaults and the two tuned results.
pub fn preset(name: &str) -> Option<ParamVector> {
    match name {
        "default" => Some(ParamVector::defaults()),
        "vanilla-bo" => Some(ParamVector([
            7.2e4, 5.8e-5, 6.5e-3, 8.1e-4, 12.3, 0.45, 3.2, 2.8, 15.4, 1.5, 1.3, 8.7,
        ])),
        "saasbo" => Some(ParamVector([
            4.1e4, 2.3e-5, 3.7e-3, 7.9e-4, 28.7, 0.18, 7.8, 6.5, 89.2, 2.1, 1.8, 10.3,
        ])),
        _ => None,
    }
}
