//! Configuration and commands of the command-line driver.

mod commands;
mod config;

pub use commands::*;
pub use config::{
    apply_overrides, BaselineSection, DataConfig, EvalConfig, RunConfig, SweepConfig, DEFAULT_ROOT, ROOT_ENV,
};
