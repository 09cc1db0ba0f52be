//! Library half of the `epq` binary: config parsing, artifact files and the
//! subcommands, kept here so integration tests can drive them directly.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use config::ExperimentConfig;
pub use error::{exit, CliError, CliResult};
