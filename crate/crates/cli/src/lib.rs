//! Command implementations behind the `cyclicfl` binary.

pub mod commands;
pub mod config;
