//! Command-line front end: run configs, subcommands, and exit-code mapping
//! over the core library.

pub mod commands;
pub mod config;
