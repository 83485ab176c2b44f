//! Command-line front end of the Volt/VAR rule designer.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_build_model, cmd_design, cmd_evaluate, cmd_gen_scenarios, cmd_validate_ac, AcRow, DesignRow, EvaluationRow};
pub use config::RunConfig;
pub use error::CliError;
