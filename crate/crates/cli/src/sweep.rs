//! One-parameter sweeps over a base configuration.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use uwb_core::{ExperimentConfig, Protocol};

use crate::error::HarnessError;
use crate::experiment::run_experiment;
use crate::report::AccuracyReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    SyncInterval,
    NoiseSigma,
    Method,
    /// `off` runs raw TDoA, `on` the clock filter.
    Filter,
}

impl FromStr for SweepParameter {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync_interval" | "sync_interval_s" => Ok(SweepParameter::SyncInterval),
            "noise_sigma" | "timestamp_noise_sigma_s" => Ok(SweepParameter::NoiseSigma),
            "method" => Ok(SweepParameter::Method),
            "filter" => Ok(SweepParameter::Filter),
            other => Err(HarnessError::invalid(format!(
                "unknown sweep parameter {other:?}; expected sync_interval_s, timestamp_noise_sigma_s, method or filter"
            ))),
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParameter::SyncInterval => "sync_interval_s",
            SweepParameter::NoiseSigma => "timestamp_noise_sigma_s",
            SweepParameter::Method => "method",
            SweepParameter::Filter => "filter",
        })
    }
}

fn number(value: &str) -> Result<f64, HarnessError> {
    value
        .trim()
        .parse::<f64>()
        .map_err(|_| HarnessError::invalid(format!("{value:?} is not a number")))
}

/// The base config with one field replaced.
pub fn apply(base: &ExperimentConfig, parameter: SweepParameter, value: &str) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = base.clone();
    match parameter {
        SweepParameter::SyncInterval => {
            // Keep the ranging cadence fixed while SYNCs get sparser.
            cfg.range_interval_s = Some(base.range_interval());
            cfg.sync_interval_s = number(value)?;
        }
        SweepParameter::NoiseSigma => cfg.channel.timestamp_noise_sigma_s = number(value)?,
        SweepParameter::Method => {
            cfg.solver.method = serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
                .map_err(|_| HarnessError::invalid(format!("unknown method {value:?}")))?;
        }
        SweepParameter::Filter => {
            if !base.protocol.is_tdoa() {
                return Err(HarnessError::invalid("filter sweeps need a TDoA protocol"));
            }
            cfg.protocol = match value.trim() {
                "on" | "kalman" | "true" => Protocol::TdoaKalman,
                "off" | "raw" | "false" => Protocol::TdoaRaw,
                other => return Err(HarnessError::invalid(format!("filter value {other:?} is not on/off"))),
            };
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: String,
    pub report: AccuracyReport,
}

/// Long-format CSV line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub metric: String,
    pub metric_value: f64,
}

/// Runs every value with the base seed; output order follows `values`.
pub fn run_sweep(
    base: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[String],
) -> Result<Vec<SweepPoint>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::invalid("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| apply(base, parameter, v))
        .collect::<Result<Vec<_>, _>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(cfg, v)| {
            run_experiment(cfg).map(|e| SweepPoint {
                value: v.clone(),
                report: e.report,
            })
        })
        .collect()
}

pub fn sweep_rows(parameter: SweepParameter, points: &[SweepPoint]) -> Vec<SweepRow> {
    let mut out = Vec::new();
    for p in points {
        let r = &p.report;
        let mut push = |metric: String, v: f64| {
            out.push(SweepRow {
                parameter: parameter.to_string(),
                value: p.value.clone(),
                metric,
                metric_value: v,
            })
        };
        for t in &r.thresholds {
            push(format!("pct_within_{}m", t.threshold_m), t.pct_within);
        }
        push("mean_error_m".into(), r.mean_error_m);
        push("median_error_m".into(), r.median_error_m);
        push("p95_error_m".into(), r.p95_error_m);
        push("update_rate_hz".into(), r.update_rate_hz);
        push("fixes".into(), r.fixes as f64);
        push("messages".into(), r.messages as f64);
    }
    out
}

pub fn write_sweep_csv<W: std::io::Write>(w: W, rows: &[SweepRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use uwb_core::solver::Method;
    use uwb_core::SystemLayout;

    fn base() -> ExperimentConfig {
        let mut c = ExperimentConfig::new(SystemLayout::reference_room(), Protocol::TdoaRaw, 20);
        c.channel.timestamp_noise_sigma_s = 1e-10;
        c
    }

    #[test]
    fn parameters_parse() {
        assert_eq!("sync_interval_s".parse::<SweepParameter>().unwrap(), SweepParameter::SyncInterval);
        assert_eq!("filter".parse::<SweepParameter>().unwrap(), SweepParameter::Filter);
        assert!("colour".parse::<SweepParameter>().is_err());
    }

    #[test]
    fn apply_sets_fields() {
        let c = apply(&base(), SweepParameter::SyncInterval, "0.3").unwrap();
        assert_eq!(c.sync_interval_s, 0.3);
        assert_eq!(c.range_interval(), 0.1);
        assert_eq!(apply(&base(), SweepParameter::Filter, "on").unwrap().protocol, Protocol::TdoaKalman);
        assert_eq!(
            apply(&base(), SweepParameter::Method, "quasi_newton").unwrap().solver.method,
            Method::QuasiNewton
        );
        assert!(apply(&base(), SweepParameter::SyncInterval, "0.25").is_err());
    }

    #[test]
    fn empty_sweep_rejected() {
        let err = run_sweep(&base(), SweepParameter::Method, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn results_follow_value_order() {
        let values: Vec<String> = ["least_squares", "derivative_free"].map(String::from).to_vec();
        let points = run_sweep(&base(), SweepParameter::Method, &values).unwrap();
        assert_eq!(points[0].value, "least_squares");
        assert_eq!(points[1].value, "derivative_free");
        let rows = sweep_rows(SweepParameter::Method, &points);
        assert_eq!(rows[0].metric, "pct_within_0.1m");
        assert_eq!(rows.len(), 2 * 8);
    }
}
