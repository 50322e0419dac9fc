//! Configuration handling and commands behind the `toda` binary.

pub mod commands;
pub mod config;
