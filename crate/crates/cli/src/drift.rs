//! Relative clock drift between two anchors as seen through SYNC broadcasts.

use serde::{Deserialize, Serialize};
use uwb_core::netsim::{MessageKind, Simulator};
use uwb_core::{ExperimentConfig, NodeId, TrueTime, SPEED_OF_LIGHT};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    /// SYNC transmit time on the sync node's clock.
    pub t_sync_s: f64,
    /// Difference of the received intervals, anchor A minus anchor B.
    pub interval_diff_s: f64,
    pub cumulative_diff_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftResult {
    pub anchor_a: NodeId,
    pub anchor_b: NodeId,
    pub f_sync_hz: f64,
    pub rows: Vec<DriftRow>,
    pub slope_ns_per_s: f64,
}

impl DriftResult {
    /// Ranging error that one second of this drift would cause if uncorrected.
    pub fn range_error_per_second_m(&self) -> f64 {
        SPEED_OF_LIGHT * self.slope_ns_per_s * 1e-9
    }
}

/// Least-squares slope of `y` against `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Some(sxy / sxx)
}

/// Broadcasts SYNC at `f_sync_hz` for `duration_s` and tracks how far the two
/// anchors' received intervals drift apart.
pub fn run_driftplot(config: &ExperimentConfig, f_sync_hz: f64, duration_s: f64) -> Result<DriftResult, HarnessError> {
    if config.layout.anchors.len() != 2 {
        return Err(HarnessError::invalid(format!(
            "driftplot needs exactly two anchors, found {}",
            config.layout.anchors.len()
        )));
    }
    if !(f_sync_hz.is_finite() && f_sync_hz > 0.0) || !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(HarnessError::invalid("f_sync and duration must be positive"));
    }
    config
        .layout
        .validate(2)
        .map_err(|e| HarnessError::invalid(e.to_string()))?;
    config.channel.validate().map_err(HarnessError::invalid)?;
    for (id, m) in config.clock_models() {
        m.validate()
            .map_err(|e| HarnessError::invalid(format!("clock of node {id}: {e}")))?;
    }
    let (a, b) = (config.layout.anchors[0].id, config.layout.anchors[1].id);
    let sync = config.layout.sync.id;
    let mut sim = Simulator::new(
        config.layout.clone(),
        &config.clock_models(),
        config.channel,
        config.tick_period_s,
        config.seed,
    );
    let n = (duration_s * f_sync_hz).round() as u64;
    let mut rows = Vec::new();
    let mut last: Option<(f64, f64)> = None;
    let mut first: Option<(f64, f64)> = None;
    for i in 0..=n {
        let t = TrueTime::from_seconds(i as f64 / f_sync_hz);
        let (tx, rxs) = sim.broadcast(sync, MessageKind::Sync, t, i);
        let at = |id: NodeId| rxs.iter().find(|r| r.receiver == id).map(|r| r.device_rx_time.as_seconds());
        let (Some(ra), Some(rb)) = (at(a), at(b)) else {
            continue;
        };
        if let Some((la, lb)) = last {
            let (fa, fb) = first.expect("set with last");
            rows.push(DriftRow {
                t_sync_s: tx.as_seconds(),
                interval_diff_s: (ra - la) - (rb - lb),
                // Taken from the endpoints so rounding does not accumulate.
                cumulative_diff_s: (ra - fa) - (rb - fb),
            });
        } else {
            first = Some((ra, rb));
        }
        last = Some((ra, rb));
    }
    let x: Vec<f64> = rows.iter().map(|r| r.t_sync_s).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.cumulative_diff_s).collect();
    let slope = ols_slope(&x, &y).ok_or_else(|| HarnessError::runtime("too few SYNC epochs to fit a slope"))?;
    Ok(DriftResult {
        anchor_a: a,
        anchor_b: b,
        f_sync_hz,
        rows,
        slope_ns_per_s: slope * 1e9,
    })
}

pub fn write_drift_csv<W: std::io::Write>(w: W, rows: &[DriftRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}
