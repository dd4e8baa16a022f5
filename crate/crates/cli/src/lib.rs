//! Command-line driver. The binary is a thin wrapper over [`commands::run`].

pub mod clients;
pub mod commands;
