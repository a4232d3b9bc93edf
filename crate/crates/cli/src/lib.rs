//! Command-line orchestration: corpus generation, bias-model pretraining,
//! debiased task training, evaluation and parameter sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::CliError;
