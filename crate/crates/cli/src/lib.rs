pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{Budget, RunConfig};
pub use error::CliError;
