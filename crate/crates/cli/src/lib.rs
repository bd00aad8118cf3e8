//! Command-line front end: run configuration and the `synth`, `train`,
//! `match` and `localize` commands.

pub mod commands;
pub mod config;

pub use commands::{run, Cli};
pub use config::RunConfig;
