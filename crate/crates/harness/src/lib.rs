//! Experiment orchestration for shadow-model misalignment studies:
//! configuration, datasets, checkpoints, scenario and cause-study runners,
//! reports and the `shadowalign` command line.

pub mod cause;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod report;
pub mod scenario;

pub use error::{HarnessError, Result};
