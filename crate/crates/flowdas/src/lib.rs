//! File formats, plots and pipeline commands around `flowdas-core`.
//!
//! The `flowdas` binary is a thin argument parser over [`commands::execute`];
//! everything it does is reachable from here for scripted use and tests.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod output;
pub mod plot;

pub use error::{CliError, Result};
