//! File formats, configuration, reports, fixtures and the pipeline driver
//! behind the `d2moe` command-line tool.

pub mod config;
pub mod container;
pub mod tables;
pub mod driver;
pub mod error;
pub mod fixture;
pub mod io;
pub mod report;

pub use container::{Container, ContainerError};
pub use error::{CliError, CliResult};
