//! Experiment harness: simulate datasets, run the estimators, score traces.

// `!(l <= h)` also rejects NaN bounds.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, CliResult};
