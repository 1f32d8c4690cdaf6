//! Two-way ranging: time-of-flight from message exchanges, range
//! calibration and message accounting.

use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SPEED_OF_LIGHT;
use crate::layout::NodeId;

/// Minimum time a node needs between receiving a frame and replying.
pub const DEFAULT_REPLY_FLOOR_S: f64 = 500e-6;

#[derive(Debug, Error)]
pub enum TwrError {
    #[error("exchange is degenerate: denominator {0} is not positive")]
    DegenerateExchange(f64),
    #[error("exchange lacks the second round")]
    MissingRound,
    #[error("calibration needs at least two distinct true distances")]
    RankDeficient,
    #[error("fitted slope {0} is outside the sanity band (0.5, 1.5)")]
    SlopeOutOfBand(f64),
    #[error("calibration CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("calibration CSV: {0}")]
    Format(String),
    #[error("dimension must be 2 or 3, got {0}")]
    Dimension(usize),
}

/// Round and reply durations of one ranging exchange, in seconds. The round
/// is timed by the initiator and the reply by the responder, each on its own
/// clock.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwrExchange {
    pub t_round1: f64,
    pub t_reply1: f64,
    pub t_round2: Option<f64>,
    pub t_reply2: Option<f64>,
}

impl TwrExchange {
    pub fn single(t_round1: f64, t_reply1: f64) -> Self {
        TwrExchange {
            t_round1,
            t_reply1,
            t_round2: None,
            t_reply2: None,
        }
    }

    pub fn double(t_round1: f64, t_reply1: f64, t_round2: f64, t_reply2: f64) -> Self {
        TwrExchange {
            t_round1,
            t_reply1,
            t_round2: Some(t_round2),
            t_reply2: Some(t_reply2),
        }
    }
}

/// `(T_round - T_reply) / 2`. Not clamped: noise can make it negative.
pub fn single_sided_tof(exchange: &TwrExchange) -> f64 {
    (exchange.t_round1 - exchange.t_reply1) / 2.0
}

/// Symmetric double-sided estimate
/// `(Tround1 Tround2 - Treply1 Treply2) / (Tround1 + Tround2 + Treply1 + Treply2)`.
pub fn sds_tof(exchange: &TwrExchange) -> Result<f64, TwrError> {
    let (round2, reply2) = match (exchange.t_round2, exchange.t_reply2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(TwrError::MissingRound),
    };
    let denom = exchange.t_round1 + round2 + exchange.t_reply1 + reply2;
    if !(denom > 0.0) {
        return Err(TwrError::DegenerateExchange(denom));
    }
    Ok((exchange.t_round1 * round2 - exchange.t_reply1 * reply2) / denom)
}

/// Affine range bias model `measured = slope * true + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub slope: f64,
    #[serde(rename = "offset_m")]
    pub offset: f64,
}

impl CalibrationModel {
    pub const IDENTITY: CalibrationModel = CalibrationModel {
        slope: 1.0,
        offset: 0.0,
    };

    pub fn validate(&self) -> Result<(), TwrError> {
        if !(self.slope > 0.5 && self.slope < 1.5) {
            return Err(TwrError::SlopeOutOfBand(self.slope));
        }
        Ok(())
    }

    /// Applies the forward model; useful for planting biases in tests and simulations.
    pub fn distort(&self, true_range: f64) -> f64 {
        self.slope * true_range + self.offset
    }
}

/// A per-anchor range after calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub anchor: NodeId,
    #[serde(rename = "range_m")]
    pub range: f64,
    pub epoch: u64,
    /// Set when calibration produced a negative range that was clamped to 0.
    #[serde(default)]
    pub clamped: bool,
}

impl RangeMeasurement {
    pub fn new(anchor: NodeId, range: f64, epoch: u64) -> Self {
        RangeMeasurement {
            anchor,
            range,
            epoch,
            clamped: false,
        }
    }

    pub fn calibrated(anchor: NodeId, measured: f64, epoch: u64, model: &CalibrationModel) -> Self {
        let raw = (measured - model.offset) / model.slope;
        RangeMeasurement {
            anchor,
            range: raw.max(0.0),
            epoch,
            clamped: raw < 0.0,
        }
    }
}

/// Ordinary least-squares fit of measured against true distance.
pub fn calibrate(samples: &[(f64, f64)]) -> Result<CalibrationModel, TwrError> {
    if samples.len() < 2 {
        return Err(TwrError::RankDeficient);
    }
    let n = samples.len() as f64;
    let mean_t = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_m = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mean_t).powi(2)).sum();
    let sxy: f64 = samples
        .iter()
        .map(|s| (s.0 - mean_t) * (s.1 - mean_m))
        .sum();
    let scale = samples.iter().map(|s| s.0.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= 1e-24 * scale * scale * n {
        return Err(TwrError::RankDeficient);
    }
    let slope = sxy / sxx;
    let model = CalibrationModel {
        slope,
        offset: mean_m - slope * mean_t,
    };
    model.validate()?;
    Ok(model)
}

/// Inverts the fitted model and clamps negative results to zero.
pub fn apply_calibration(model: &CalibrationModel, measured: f64) -> f64 {
    ((measured - model.offset) / model.slope).max(0.0)
}

#[derive(Debug, Deserialize)]
struct SampleRow {
    true_m: f64,
    measured_m: f64,
}

/// Reads `(true_m, measured_m)` rows from a CSV with a header line.
pub fn read_calibration_samples<R: Read>(reader: R) -> Result<Vec<(f64, f64)>, TwrError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if !(headers.iter().any(|h| h == "true_m") && headers.iter().any(|h| h == "measured_m")) {
        return Err(TwrError::Format(
            "header must name the columns true_m and measured_m".into(),
        ));
    }
    rdr.deserialize::<SampleRow>()
        .map(|row| row.map(|r| (r.true_m, r.measured_m)).map_err(TwrError::from))
        .collect()
}

/// Messages and timing needed for one TWR position fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageBudget {
    pub n_anchors: usize,
    pub messages_per_anchor: usize,
    pub messages_per_localization: usize,
    /// Time for one fix when every message turn waits out the reply floor.
    pub localization_period_s: f64,
    pub max_update_rate_hz: f64,
}

/// Anchors needed to disambiguate a fix in `n_dim` dimensions and the
/// message count per fix. Tag-initiated ranging costs one extra message per
/// anchor because the range has to be sent back to the tag.
pub fn message_budget(
    n_dim: usize,
    tag_initiated: bool,
    reply_floor_s: f64,
) -> Result<MessageBudget, TwrError> {
    if !(n_dim == 2 || n_dim == 3) {
        return Err(TwrError::Dimension(n_dim));
    }
    let n_anchors = n_dim + 1;
    let per_anchor = if tag_initiated { 4 } else { 3 };
    let total = per_anchor * n_anchors;
    let period = total as f64 * reply_floor_s;
    Ok(MessageBudget {
        n_anchors,
        messages_per_anchor: per_anchor,
        messages_per_localization: total,
        localization_period_s: period,
        max_update_rate_hz: 1.0 / period,
    })
}

/// Forward TDoA update rate when each fix costs `messages` reply-floor turns.
pub fn tdoa_update_rate(messages: usize, reply_floor_s: f64) -> f64 {
    1.0 / (messages as f64 * reply_floor_s)
}

/// Converts a time of flight into meters.
pub fn tof_to_range(tof: f64) -> f64 {
    tof * SPEED_OF_LIGHT
}
