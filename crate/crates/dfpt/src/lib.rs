//! Host-side companion to `dfpt-core`: checkpoint and dataset files, IDX and
//! CIFAR readers, run configuration, CSV reports, SVG plots and the command
//! implementations behind the `dfpt` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod loaders;
pub mod plot;
pub mod report;

pub use error::{IoError, Result};
