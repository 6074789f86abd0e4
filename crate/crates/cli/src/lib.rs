//! Configuration, pipeline commands and report files behind the `lamole`
//! binary.

pub mod commands;
pub mod config;
pub mod reports;

pub use commands::{RunError, SELFCHECK_TOLERANCE};
pub use config::{load_config, ConfigError, Paths, RunConfig};
