//! Configuration, dispatch and report emission.

pub mod config;
pub mod report;
pub mod run;

pub use config::{parse_config, RunConfig};
pub use run::{execute, Command, Overrides};
