//! Declarative experiment description. Every field carries its unit in its name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockKfParams, ClockModel};
use crate::geometry::{distance, Position};
use crate::layout::{NodeId, SystemLayout};
use crate::netsim::ChannelModel;
use crate::solver::Method;
use crate::time::DEFAULT_TICK_PERIOD;
use crate::twr::{CalibrationModel, DEFAULT_REPLY_FLOOR_S};

pub const SCHEMA_VERSION: u32 = 1;

/// Fastest the tag is allowed to move.
pub const DEFAULT_MAX_SPEED_M_S: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    TwrSingle,
    TwrSds,
    TdoaRaw,
    TdoaKalman,
}

impl Protocol {
    pub fn is_tdoa(self) -> bool {
        matches!(self, Protocol::TdoaRaw | Protocol::TdoaKalman)
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::TwrSingle => "twr_single",
            Protocol::TwrSds => "twr_sds",
            Protocol::TdoaRaw => "tdoa_raw",
            Protocol::TdoaKalman => "tdoa_kalman",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeClock {
    pub node: NodeId,
    #[serde(flatten)]
    pub model: ClockModel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSet {
    #[serde(default)]
    pub default: ClockModel,
    #[serde(default)]
    pub nodes: Vec<NodeClock>,
}

impl ClockSet {
    pub fn model_for(&self, id: NodeId) -> ClockModel {
        self.nodes
            .iter()
            .find(|c| c.node == id)
            .map(|c| c.model)
            .unwrap_or(self.default)
    }

    pub fn resolve(&self, ids: &[NodeId]) -> BTreeMap<NodeId, ClockModel> {
        ids.iter().map(|&id| (id, self.model_for(id))).collect()
    }

    pub fn set(&mut self, id: NodeId, model: ClockModel) {
        match self.nodes.iter_mut().find(|c| c.node == id) {
            Some(c) => c.model = model,
            None => self.nodes.push(NodeClock { node: id, model }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Static(Position),
    /// Closed loop through the points at constant speed.
    Waypoints {
        points: Vec<Position>,
        speed_m_s: f64,
    },
}

impl Trajectory {
    pub fn position_at(&self, t_s: f64) -> Position {
        match self {
            Trajectory::Static(p) => *p,
            Trajectory::Waypoints { points, speed_m_s } => {
                if points.len() < 2 || *speed_m_s <= 0.0 {
                    return points.first().copied().unwrap_or_default();
                }
                let legs: Vec<(Position, Position, f64)> = points
                    .iter()
                    .zip(points.iter().cycle().skip(1))
                    .map(|(&a, &b)| (a, b, distance(a, b)))
                    .collect();
                let loop_len: f64 = legs.iter().map(|l| l.2).sum();
                if loop_len == 0.0 {
                    return points[0];
                }
                let mut s = (t_s.max(0.0) * speed_m_s) % loop_len;
                for (a, b, len) in &legs {
                    if s <= *len {
                        if *len == 0.0 {
                            return *a;
                        }
                        return *a + (*b - *a) * (s / len);
                    }
                    s -= len;
                }
                points[0]
            }
        }
    }

    pub fn speed(&self) -> f64 {
        match self {
            Trajectory::Static(_) => 0.0,
            Trajectory::Waypoints { speed_m_s, .. } => *speed_m_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    /// Warm-start each fix from the previous one.
    pub use_prior: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::LeastSquares,
            use_prior: false,
        }
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_sync_interval() -> f64 {
    0.1
}
fn default_reply() -> f64 {
    DEFAULT_REPLY_FLOOR_S
}
fn default_tick() -> f64 {
    DEFAULT_TICK_PERIOD
}
fn default_max_speed() -> f64 {
    DEFAULT_MAX_SPEED_M_S
}
fn default_thresholds() -> Vec<f64> {
    vec![0.1, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub layout: SystemLayout,
    pub protocol: Protocol,
    #[serde(default = "default_sync_interval")]
    pub sync_interval_s: f64,
    /// Tag ranging period; defaults to the sync interval (one RANGE per SYNC).
    #[serde(default)]
    pub range_interval_s: Option<f64>,
    pub epochs: u64,
    #[serde(default = "default_reply")]
    pub reply_delay_s: f64,
    #[serde(default = "default_tick")]
    pub tick_period_s: f64,
    #[serde(default)]
    pub clocks: ClockSet,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub trajectory: Option<Trajectory>,
    #[serde(default = "default_max_speed")]
    pub max_speed_m_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub kalman: ClockKfParams,
    /// Applied to TWR ranges before solving.
    #[serde(default)]
    pub calibration: Option<CalibrationModel>,
    #[serde(default = "default_thresholds")]
    pub thresholds_m: Vec<f64>,
    /// Solve epochs with missing stamps from the remaining anchors.
    #[serde(default)]
    pub allow_degraded: bool,
}

impl ExperimentConfig {
    /// A minimal configuration on the reference room with ideal clocks.
    pub fn new(layout: SystemLayout, protocol: Protocol, epochs: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            layout,
            protocol,
            sync_interval_s: default_sync_interval(),
            range_interval_s: None,
            epochs,
            reply_delay_s: default_reply(),
            tick_period_s: default_tick(),
            clocks: ClockSet::default(),
            channel: ChannelModel::default(),
            trajectory: None,
            max_speed_m_s: default_max_speed(),
            seed: 0,
            solver: SolverConfig::default(),
            kalman: ClockKfParams::default(),
            calibration: None,
            thresholds_m: default_thresholds(),
            allow_degraded: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
            let at = format!("line {} column {}", e.line(), e.column());
            let msg = e.to_string();
            let msg = msg.strip_suffix(&format!(" at {at}")).unwrap_or(&msg).to_string();
            ConfigError::new(at, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn range_interval(&self) -> f64 {
        self.range_interval_s.unwrap_or(self.sync_interval_s)
    }

    /// RANGE epochs per SYNC broadcast.
    pub fn ranges_per_sync(&self) -> u64 {
        (self.sync_interval_s / self.range_interval()).round().max(1.0) as u64
    }

    pub fn trajectory(&self) -> Trajectory {
        self.trajectory
            .clone()
            .unwrap_or(Trajectory::Static(self.layout.tag_start))
    }

    pub fn clock_models(&self) -> BTreeMap<NodeId, ClockModel> {
        self.clocks.resolve(&self.layout.node_ids())
    }

    /// Everything except the epoch count, which may be zero for an empty run.
    pub fn validate_structure(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let min_anchors = if self.protocol.is_tdoa() { 3 } else { 2 };
        self.layout
            .validate(min_anchors)
            .map_err(|e| ConfigError::new("layout", e.to_string()))?;
        positive("sync_interval_s", self.sync_interval_s)?;
        positive("range_interval_s", self.range_interval())?;
        positive("tick_period_s", self.tick_period_s)?;
        if !(self.reply_delay_s.is_finite() && self.reply_delay_s >= DEFAULT_REPLY_FLOOR_S) {
            return Err(ConfigError::new(
                "reply_delay_s",
                format!("must be at least the {DEFAULT_REPLY_FLOOR_S} s reply floor"),
            ));
        }
        if self.protocol.is_tdoa() {
            let k = self.sync_interval_s / self.range_interval();
            if k < 1.0 - 1e-9 || (k - k.round()).abs() > 1e-6 {
                return Err(ConfigError::new(
                    "range_interval_s",
                    "sync interval must be a whole multiple of the range interval",
                ));
            }
            if self.range_interval() <= 3.0 * self.reply_delay_s {
                return Err(ConfigError::new(
                    "range_interval_s",
                    "too short for RANGE_REQ, SYNC and RANGE turns",
                ));
            }
        } else {
            let exchange = self.layout.anchors.len() as f64 * 5.0 * self.reply_delay_s;
            if self.range_interval() <= exchange {
                return Err(ConfigError::new(
                    "range_interval_s",
                    format!("too short for the TWR exchanges ({exchange} s needed)"),
                ));
            }
        }
        for (id, model) in self.clock_models() {
            model
                .validate()
                .map_err(|e| ConfigError::new(format!("clocks.node {id}"), e.to_string()))?;
        }
        for nc in &self.clocks.nodes {
            if self.layout.role_of(nc.node).is_none() {
                return Err(ConfigError::new(
                    "clocks.nodes",
                    format!("node {} is not in the layout", nc.node),
                ));
            }
        }
        self.channel
            .validate()
            .map_err(|m| ConfigError::new("channel", m))?;
        self.kalman
            .validate()
            .map_err(|e| ConfigError::new("kalman", e.to_string()))?;
        if let Some(cal) = &self.calibration {
            cal.validate()
                .map_err(|e| ConfigError::new("calibration", e.to_string()))?;
        }
        if !(self.max_speed_m_s.is_finite() && self.max_speed_m_s > 0.0) {
            return Err(ConfigError::new("max_speed_m_s", "must be positive"));
        }
        match self.trajectory() {
            Trajectory::Static(p) => {
                if !self.layout.bounds.contains(p) {
                    return Err(ConfigError::new("trajectory", "static point is out of bounds"));
                }
            }
            Trajectory::Waypoints { points, speed_m_s } => {
                if points.is_empty() {
                    return Err(ConfigError::new("trajectory", "needs at least one waypoint"));
                }
                if !(speed_m_s.is_finite() && speed_m_s >= 0.0) {
                    return Err(ConfigError::new("trajectory.speed_m_s", "must be non-negative"));
                }
                if speed_m_s > self.max_speed_m_s {
                    return Err(ConfigError::new(
                        "trajectory.speed_m_s",
                        format!("{speed_m_s} exceeds max_speed_m_s {}", self.max_speed_m_s),
                    ));
                }
                if points.iter().any(|p| !self.layout.bounds.contains(*p)) {
                    return Err(ConfigError::new("trajectory", "waypoint out of bounds"));
                }
            }
        }
        if self.thresholds_m.is_empty()
            || self.thresholds_m.iter().any(|t| !(t.is_finite() && *t > 0.0))
        {
            return Err(ConfigError::new("thresholds_m", "need positive thresholds"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_structure()?;
        if self.epochs == 0 {
            return Err(ConfigError::new("epochs", "must be at least 1"));
        }
        Ok(())
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::new(field, format!("must be positive, got {v}")))
    }
}
