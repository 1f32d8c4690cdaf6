//! Experiment harness: configs in, traces, position fixes and accuracy
//! reports out.

pub mod drift;
pub mod error;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod sweep;

pub use error::HarnessError;
pub use experiment::{load_config, run_experiment, simulate, Experiment};
