//! Config parsing and subcommand bodies behind the `tailtp` binary.

pub mod commands;
pub mod config;
pub mod failure;
