//! Command-line pipeline around `dapt-core`: vocabulary training, MLM
//! adaptation, staged fine-tuning, evaluation, the TF-IDF baseline and
//! report comparison, plus synthetic fixtures.

pub mod cli;
pub mod commands;
pub mod compare;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
