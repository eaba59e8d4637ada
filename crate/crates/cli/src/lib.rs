//! Command-line runner for the block-diffusion engine: JSON configs, JSONL
//! run reports, replay, and the acceptance checks.

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod report;

pub use config::{ConfigError, RunConfig};
pub use report::{CommandResult, RunReport};
