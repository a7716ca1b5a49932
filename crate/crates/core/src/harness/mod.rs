//! Configuration, checkpoints, metrics and the commands behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
