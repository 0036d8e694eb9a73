//! Command-line front end for ITN training, evaluation, sampling, gradient
//! checks and the seeded comparison protocols.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;
pub mod images;
pub mod protocol;

pub use config::RunConfig;
pub use error::CliError;
