//! Config loading and the simulate, localize, report chain.

use std::fs;
use std::path::Path;

use uwb_core::netsim::{run_scenario, EventTrace};
use uwb_core::ExperimentConfig;

use crate::error::HarnessError;
use crate::pipeline::{localize, Localization};
use crate::report::{build_report, AccuracyReport};

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

pub fn simulate(config: &ExperimentConfig) -> Result<EventTrace, HarnessError> {
    config.validate()?;
    Ok(run_scenario(config)?)
}

pub struct Experiment {
    pub trace: EventTrace,
    pub localization: Localization,
    pub report: AccuracyReport,
}

/// Simulates, solves and scores one configuration.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Experiment, HarnessError> {
    let trace = simulate(config)?;
    let localization = localize(config, &trace)?;
    let report = build_report(
        config,
        &localization.rows,
        &localization.truth,
        &config.thresholds_m,
        Some(&trace),
    )
    .map_err(|e| match e {
        HarnessError::Invalid(m) => HarnessError::Runtime(m),
        other => other,
    })?;
    Ok(Experiment {
        trace,
        localization,
        report,
    })
}
