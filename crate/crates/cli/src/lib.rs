//! Command-line pipeline over one output directory.

pub mod config;
pub mod error;
pub mod pipeline;

pub use config::RunConfig;
pub use error::CliError;
pub use pipeline::{Command, Layout, ReportFormat, Runner};
