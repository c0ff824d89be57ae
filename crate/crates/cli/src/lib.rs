//! Command-line front end: configuration handling and the subcommands.

pub mod commands;
pub mod config;
