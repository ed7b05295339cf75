//! Experiment driver for hierarchical speculative decoding: parameter
//! sweeps, ablations, strategy comparison, verification-wall table and
//! state checks, all over a declarative JSON config.

pub mod check;
pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod wall;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use report::Format;
pub use run::{Experiment, Point, Row, RunResult, Skipped, Strategy};
