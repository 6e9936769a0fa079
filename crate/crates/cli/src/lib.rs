//! Command implementations behind the `regimenas` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
