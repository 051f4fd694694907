//! Experiment driver for the eqfree toolkit: configuration files, presets,
//! stage runners and reproducible manifests.

pub mod config;
pub mod presets;
pub mod runner;

pub use config::RunConfig;
pub use presets::{preset, Stage};
pub use runner::{resolve, run, run_all, Check, Failure, Invocation, Overrides, Report};
