//! Library side of the `oatflow` command: config loading and the five commands.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_bench, cmd_eval, cmd_export_traj, cmd_refine, cmd_train, EvalReport};
pub use config::{RunConfig, SEED_ENV};
pub use error::CliError;
