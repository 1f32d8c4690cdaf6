//! Accuracy statistics over a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uwb_core::netsim::EventTrace;
use uwb_core::{distance, ExperimentConfig, Position};

use crate::error::HarnessError;
use crate::pipeline::{FixStatus, PositionRow, TruthRow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub epoch: u64,
    pub true_x: f64,
    pub true_y: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub error_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPct {
    pub threshold_m: f64,
    pub pct_within: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub seed: u64,
    pub config_hash: String,
    pub protocol: String,
    pub epochs: u64,
    pub fixes: usize,
    pub thresholds: Vec<ThresholdPct>,
    pub mean_error_m: f64,
    pub median_error_m: f64,
    pub p95_error_m: f64,
    pub max_error_m: f64,
    /// Fixes per second of simulated time.
    pub update_rate_hz: f64,
    pub message_counts: BTreeMap<String, usize>,
    pub messages: usize,
    pub drops: usize,
    pub rows: Vec<ErrorRow>,
}

impl AccuracyReport {
    pub fn pct_at(&self, threshold_m: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.threshold_m - threshold_m).abs() < 1e-12)
            .map(|t| t.pct_within)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol      {}", self.protocol);
        let _ = writeln!(s, "seed          {}", self.seed);
        let _ = writeln!(s, "config sha256 {}", self.config_hash);
        let _ = writeln!(s, "fixes         {} / {} epochs", self.fixes, self.epochs);
        for t in &self.thresholds {
            let _ = writeln!(s, "<= {:>6.1} cm  {:>6.1} %", t.threshold_m * 100.0, t.pct_within);
        }
        let _ = writeln!(s, "mean error    {:.4} m", self.mean_error_m);
        let _ = writeln!(s, "median error  {:.4} m", self.median_error_m);
        let _ = writeln!(s, "p95 error     {:.4} m", self.p95_error_m);
        let _ = writeln!(s, "update rate   {:.2} Hz", self.update_rate_hz);
        let _ = write!(s, "messages      {} ({} dropped)", self.messages, self.drops);
        s
    }
}

/// Percentage of errors at or below each threshold.
pub fn pct_within(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|t| {
            if errors.is_empty() {
                0.0
            } else {
                100.0 * errors.iter().filter(|e| **e <= *t).count() as f64 / errors.len() as f64
            }
        })
        .collect()
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// SHA-256 of the canonical JSON form of a config.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Joins fixes with truth on the epoch counter.
pub fn error_rows(rows: &[PositionRow], truth: &[TruthRow]) -> Vec<ErrorRow> {
    let truth: BTreeMap<u64, Position> = truth.iter().map(|t| (t.epoch, Position::new(t.x, t.y))).collect();
    rows.iter()
        .filter(|r| r.status == FixStatus::Ok)
        .filter_map(|r| {
            let est = r.position()?;
            let t = truth.get(&r.epoch)?;
            Some(ErrorRow {
                epoch: r.epoch,
                true_x: t.x,
                true_y: t.y,
                est_x: est.x,
                est_y: est.y,
                error_m: distance(est, *t),
            })
        })
        .collect()
}

pub fn build_report(
    config: &ExperimentConfig,
    rows: &[PositionRow],
    truth: &[TruthRow],
    thresholds: &[f64],
    trace: Option<&EventTrace>,
) -> Result<AccuracyReport, HarnessError> {
    if thresholds.is_empty() || thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(HarnessError::invalid("thresholds must be positive"));
    }
    let joined = error_rows(rows, truth);
    if joined.is_empty() {
        return Err(HarnessError::invalid("no solved epochs to report on"));
    }
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let errors: Vec<f64> = joined.iter().map(|r| r.error_m).collect();
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = pct_within(&errors, &thresholds);
    let duration = config.epochs as f64 * config.range_interval();
    let (message_counts, messages, drops) = match trace {
        Some(t) => (
            t.tx_counts()
                .into_iter()
                .map(|(k, v)| (k.name().to_string(), v))
                .collect(),
            t.messages(),
            t.drops(),
        ),
        None => (BTreeMap::new(), 0, 0),
    };
    Ok(AccuracyReport {
        seed: config.seed,
        config_hash: config_hash(config),
        protocol: config.protocol.name().to_string(),
        epochs: config.epochs,
        fixes: joined.len(),
        thresholds: thresholds
            .iter()
            .zip(pct)
            .map(|(&threshold_m, pct_within)| ThresholdPct { threshold_m, pct_within })
            .collect(),
        mean_error_m: errors.iter().sum::<f64>() / errors.len() as f64,
        median_error_m: median(&sorted),
        p95_error_m: percentile(&sorted, 0.95),
        max_error_m: *sorted.last().expect("non-empty"),
        update_rate_hz: if duration > 0.0 { joined.len() as f64 / duration } else { 0.0 },
        message_counts,
        messages,
        drops,
        rows: joined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use uwb_core::{Protocol, SystemLayout};

    #[test]
    fn counting_example() {
        let p = pct_within(&[0.05, 0.15, 0.25], &[0.1, 0.2]);
        assert!((p[0] - 100.0 / 3.0).abs() < 1e-9);
        assert!((p[1] - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(pct_within(&[0.0, 0.0], &[0.1, 0.2]), vec![100.0, 100.0]);
    }

    #[test]
    fn report_statistics() {
        let cfg = ExperimentConfig::new(SystemLayout::reference_room(), Protocol::TdoaRaw, 4);
        let truth: Vec<TruthRow> = (0..4).map(|e| TruthRow { epoch: e, x: 0.0, y: 2.0 }).collect();
        let errs = [0.05, 0.15, 0.25, 0.35];
        let rows: Vec<PositionRow> = errs
            .iter()
            .enumerate()
            .map(|(i, e)| PositionRow {
                epoch: i as u64,
                status: FixStatus::Ok,
                x: Some(*e),
                y: Some(2.0),
                residual: Some(0.0),
                iterations: Some(1),
                wall_time_us: Some(1.0),
            })
            .collect();
        let r = build_report(&cfg, &rows, &truth, &[0.2, 0.1], None).unwrap();
        assert_eq!(r.fixes, 4);
        assert_eq!(r.thresholds[0].threshold_m, 0.1);
        assert_eq!(r.pct_at(0.1), Some(25.0));
        assert_eq!(r.pct_at(0.2), Some(50.0));
        assert!((r.mean_error_m - 0.2).abs() < 1e-12);
        assert!((r.median_error_m - 0.2).abs() < 1e-12);
        assert!((r.p95_error_m - 0.35).abs() < 1e-12);
        assert_eq!(r.seed, 0);
        assert_eq!(r.config_hash.len(), 64);
        assert!((r.update_rate_hz - 10.0).abs() < 1e-9);
        assert!(r.table().contains("<=   10.0 cm"));
    }

    #[test]
    fn empty_input_is_an_error() {
        let cfg = ExperimentConfig::new(SystemLayout::reference_room(), Protocol::TdoaRaw, 4);
        assert!(matches!(
            build_report(&cfg, &[], &[], &[0.1], None),
            Err(HarnessError::Invalid(_))
        ));
    }

    #[test]
    fn hash_changes_with_config() {
        let a = ExperimentConfig::new(SystemLayout::reference_room(), Protocol::TdoaRaw, 4);
        let mut b = a.clone();
        b.seed = 1;
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    proptest! {
        #[test]
        fn pct_within_is_monotone(errors in prop::collection::vec(0.0..1.0f64, 1..50),
                                  mut thresholds in prop::collection::vec(0.001..1.0f64, 1..6)) {
            thresholds.sort_by(f64::total_cmp);
            let p = pct_within(&errors, &thresholds);
            prop_assert!(p.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
