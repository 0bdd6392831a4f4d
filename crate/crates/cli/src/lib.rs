//! Library half of the `relmem` command-line tool.

pub mod commands;
pub mod run_config;
