pub mod cli;
pub mod service;

pub use cli::{run, Cli, CliError};
