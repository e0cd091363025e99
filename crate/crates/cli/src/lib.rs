//! Command-line front end: configuration, file formats, the subcommands and
//! the cached end-to-end pipeline.

pub mod app;
pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod svg;

pub use error::{CliError, Result};
