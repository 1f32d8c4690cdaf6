//! Deterministic message-level simulator for the ranging protocols.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{ClockModel, ClockRealization};
use crate::geometry::{propagation_delay, Position};
use crate::layout::{NodeId, NodeRole, SystemLayout};
use crate::scenario::{ConfigError, ExperimentConfig, Protocol, Trajectory};
use crate::time::{DeviceTime, TrueTime, PICOS_PER_SECOND};
use crate::twr::DEFAULT_REPLY_FLOOR_S;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Poll,
    PollAck,
    RangeFinal,
    /// Anchor returns its two stamps to the tag so the tag can finish SDS.
    RangeReport,
    RangeReq,
    Sync,
    Range,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Poll => "POLL",
            MessageKind::PollAck => "POLL_ACK",
            MessageKind::RangeFinal => "RANGE_FINAL",
            MessageKind::RangeReport => "RANGE_REPORT",
            MessageKind::RangeReq => "RANGE_REQ",
            MessageKind::Sync => "SYNC",
            MessageKind::Range => "RANGE",
        }
    }

    pub fn is_twr(self) -> bool {
        matches!(
            self,
            MessageKind::Poll
                | MessageKind::PollAck
                | MessageKind::RangeFinal
                | MessageKind::RangeReport
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NearAnchorBias {
    pub radius_m: f64,
    pub bias_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    pub timestamp_noise_sigma_s: f64,
    pub drop_probability: f64,
    /// Extra RX delay on tag-anchor links shorter than the radius.
    pub near_anchor_bias: Option<NearAnchorBias>,
    /// Uncalibrated antenna delay added to every RX stamp.
    pub antenna_delay_s: f64,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timestamp_noise_sigma_s.is_finite() && self.timestamp_noise_sigma_s >= 0.0) {
            return Err("timestamp_noise_sigma_s must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err("drop_probability must lie in [0, 1]".into());
        }
        if !(self.antenna_delay_s.is_finite() && self.antenna_delay_s >= 0.0) {
            return Err("antenna_delay_s must be non-negative".into());
        }
        if let Some(b) = self.near_anchor_bias {
            if !(b.radius_m.is_finite() && b.radius_m >= 0.0 && b.bias_s.is_finite()) {
                return Err("near_anchor_bias needs a non-negative radius".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxRecord {
    pub receiver: NodeId,
    pub sender: NodeId,
    pub kind: MessageKind,
    pub device_rx_time: DeviceTime,
    pub true_rx_time: TrueTime,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Tx,
    Rx,
    Drop,
}

/// One line of a trace. For TX events `receiver` is the addressee (absent
/// for broadcasts); drops carry no device stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub event: EventType,
    pub epoch: u64,
    pub kind: MessageKind,
    pub sender: NodeId,
    pub receiver: Option<NodeId>,
    pub device_ticks: Option<u64>,
    pub true_ps: u64,
}

impl TraceEvent {
    /// The node at which the event happens.
    pub fn node(&self) -> NodeId {
        match self.event {
            EventType::Tx => self.sender,
            _ => self.receiver.unwrap_or(self.sender),
        }
    }

    fn order_key(&self) -> (u64, NodeId, MessageKind, EventType, NodeId) {
        (self.true_ps, self.node(), self.kind, self.event, self.sender)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceHeader {
    trace_version: u32,
    rng_seed: u64,
    tick_period_s: f64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace has no header line")]
    MissingHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace {
    pub rng_seed: u64,
    pub tick_period: f64,
    pub events: Vec<TraceEvent>,
}

impl EventTrace {
    pub fn empty(rng_seed: u64, tick_period: f64) -> Self {
        EventTrace {
            rng_seed,
            tick_period,
            events: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Transmitted messages per kind.
    pub fn tx_counts(&self) -> BTreeMap<MessageKind, usize> {
        let mut out = BTreeMap::new();
        for e in self.events.iter().filter(|e| e.event == EventType::Tx) {
            *out.entry(e.kind).or_insert(0) += 1;
        }
        out
    }

    pub fn messages(&self) -> usize {
        self.events.iter().filter(|e| e.event == EventType::Tx).count()
    }

    pub fn drops(&self) -> usize {
        self.events.iter().filter(|e| e.event == EventType::Drop).count()
    }

    pub fn epochs(&self) -> u64 {
        self.events.iter().map(|e| e.epoch + 1).max().unwrap_or(0)
    }

    /// Header line followed by one JSON object per event.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TraceError> {
        let header = TraceHeader {
            trace_version: 1,
            rng_seed: self.rng_seed,
            tick_period_s: self.tick_period,
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for e in &self.events {
            writeln!(w, "{}", serde_json::to_string(e).expect("event serializes"))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TraceError> {
        let mut header: Option<TraceHeader> = None;
        let mut events = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |e: serde_json::Error| TraceError::Parse {
                line: i + 1,
                message: e.to_string(),
            };
            if header.is_none() {
                header = Some(serde_json::from_str(&line).map_err(parse_err)?);
            } else {
                events.push(serde_json::from_str(&line).map_err(parse_err)?);
            }
        }
        let h = header.ok_or(TraceError::MissingHeader)?;
        Ok(EventTrace {
            rng_seed: h.rng_seed,
            tick_period: h.tick_period_s,
            events,
        })
    }
}

/// Earliest permitted reply time: `max(requested_tx, rx + 500 us)`.
pub fn enforce_reply_delay(rx: TrueTime, requested_tx: TrueTime) -> TrueTime {
    enforce_reply_floor(rx, requested_tx, DEFAULT_REPLY_FLOOR_S)
}

pub fn enforce_reply_floor(rx: TrueTime, requested_tx: TrueTime, floor_s: f64) -> TrueTime {
    requested_tx.max(rx.plus_seconds(floor_s))
}

/// Message-level simulator state for one scenario run.
pub struct Simulator {
    layout: SystemLayout,
    clocks: BTreeMap<NodeId, ClockRealization>,
    channel: ChannelModel,
    tick_period: f64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    tag_position: Position,
    seed: u64,
    events: Vec<TraceEvent>,
}

impl Simulator {
    pub fn new(
        layout: SystemLayout,
        clocks: &BTreeMap<NodeId, ClockModel>,
        channel: ChannelModel,
        tick_period: f64,
        seed: u64,
    ) -> Self {
        let realized = layout
            .node_ids()
            .into_iter()
            .map(|id| {
                let model = clocks.get(&id).copied().unwrap_or_default();
                let clock_seed = seed ^ (u64::from(id.0)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                (id, ClockRealization::new(model, clock_seed))
            })
            .collect();
        let noise = (channel.timestamp_noise_sigma_s > 0.0)
            .then(|| Normal::new(0.0, channel.timestamp_noise_sigma_s).expect("valid sigma"));
        Simulator {
            tag_position: layout.tag_start,
            layout,
            clocks: realized,
            channel,
            tick_period,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            seed,
            events: Vec::new(),
        }
    }

    pub fn set_tag_position(&mut self, p: Position) {
        self.tag_position = p;
    }

    pub fn position_of(&self, id: NodeId) -> Option<Position> {
        if id == self.layout.tag_id {
            Some(self.tag_position)
        } else {
            self.layout.fixed_position(id)
        }
    }

    fn stamp(&mut self, node: NodeId, t_exact: f64, extra: f64) -> DeviceTime {
        let clock = self.clocks.get_mut(&node).expect("node has a clock");
        DeviceTime::from_seconds(clock.reading(t_exact) + extra, self.tick_period)
    }

    /// Sends one message, to `dest` only or to every other node.
    pub fn transmit(
        &mut self,
        sender: NodeId,
        dest: Option<NodeId>,
        kind: MessageKind,
        tx_true: TrueTime,
        epoch: u64,
    ) -> (DeviceTime, Vec<RxRecord>) {
        let from = self.position_of(sender).expect("sender in layout");
        let tx_stamp = self.stamp(sender, tx_true.as_seconds(), 0.0);
        self.events.push(TraceEvent {
            event: EventType::Tx,
            epoch,
            kind,
            sender,
            receiver: dest,
            device_ticks: Some(tx_stamp.ticks),
            true_ps: tx_true.picoseconds,
        });
        let receivers: Vec<NodeId> = match dest {
            Some(d) => vec![d],
            None => self
                .layout
                .node_ids()
                .into_iter()
                .filter(|&id| id != sender)
                .collect(),
        };
        let mut out = Vec::with_capacity(receivers.len());
        for receiver in receivers {
            let to = self.position_of(receiver).expect("receiver in layout");
            let delay = propagation_delay(from, to);
            let true_rx = tx_true.plus_picos((delay * PICOS_PER_SECOND).round() as u64);
            // Drop and noise draws happen for every link so the random stream
            // does not depend on geometry.
            let dropped = self.rng.gen::<f64>() < self.channel.drop_probability;
            let jitter = match self.noise {
                Some(n) => n.sample(&mut self.rng),
                None => 0.0,
            };
            if dropped {
                self.events.push(TraceEvent {
                    event: EventType::Drop,
                    epoch,
                    kind,
                    sender,
                    receiver: Some(receiver),
                    device_ticks: None,
                    true_ps: true_rx.picoseconds,
                });
                continue;
            }
            let extra = jitter + self.channel.antenna_delay_s + self.link_bias(sender, receiver, delay);
            let rx_stamp = self.stamp(receiver, tx_true.as_seconds() + delay, extra);
            self.events.push(TraceEvent {
                event: EventType::Rx,
                epoch,
                kind,
                sender,
                receiver: Some(receiver),
                device_ticks: Some(rx_stamp.ticks),
                true_ps: true_rx.picoseconds,
            });
            out.push(RxRecord {
                receiver,
                sender,
                kind,
                device_rx_time: rx_stamp,
                true_rx_time: true_rx,
                epoch,
            });
        }
        (tx_stamp, out)
    }

    pub fn broadcast(
        &mut self,
        sender: NodeId,
        kind: MessageKind,
        tx_true: TrueTime,
        epoch: u64,
    ) -> (DeviceTime, Vec<RxRecord>) {
        self.transmit(sender, None, kind, tx_true, epoch)
    }

    fn link_bias(&self, a: NodeId, b: NodeId, delay: f64) -> f64 {
        let Some(bias) = self.channel.near_anchor_bias else {
            return 0.0;
        };
        let roles = (self.layout.role_of(a), self.layout.role_of(b));
        let tag_anchor = matches!(
            roles,
            (Some(NodeRole::Tag), Some(NodeRole::Anchor)) | (Some(NodeRole::Anchor), Some(NodeRole::Tag))
        );
        if tag_anchor && delay * crate::geometry::SPEED_OF_LIGHT <= bias.radius_m {
            bias.bias_s
        } else {
            0.0
        }
    }

    pub fn into_trace(mut self) -> EventTrace {
        self.events.sort_by_key(|e| e.order_key());
        EventTrace {
            rng_seed: self.seed,
            tick_period: self.tick_period,
            events: self.events,
        }
    }
}

/// One-shot broadcast with fresh clock realizations.
pub fn broadcast(
    layout: &SystemLayout,
    sender: NodeId,
    kind: MessageKind,
    tx_true: TrueTime,
    clocks: &BTreeMap<NodeId, ClockModel>,
    channel: &ChannelModel,
    tick_period: f64,
    seed: u64,
) -> (DeviceTime, Vec<RxRecord>) {
    let mut sim = Simulator::new(layout.clone(), clocks, *channel, tick_period, seed);
    sim.broadcast(sender, kind, tx_true, 0)
}

fn received_by(rxs: &[RxRecord], node: NodeId) -> Option<RxRecord> {
    rxs.iter().find(|r| r.receiver == node).copied()
}

/// Runs the configured protocol and returns the full event trace.
pub fn run_scenario(config: &ExperimentConfig) -> Result<EventTrace, ConfigError> {
    config.validate_structure()?;
    let mut sim = Simulator::new(
        config.layout.clone(),
        &config.clock_models(),
        config.channel,
        config.tick_period_s,
        config.seed,
    );
    let trajectory = config.trajectory();
    match config.protocol {
        Protocol::TdoaRaw | Protocol::TdoaKalman => run_tdoa(config, &trajectory, &mut sim),
        Protocol::TwrSingle | Protocol::TwrSds => run_twr(config, &trajectory, &mut sim),
    }
    Ok(sim.into_trace())
}

fn run_tdoa(config: &ExperimentConfig, trajectory: &Trajectory, sim: &mut Simulator) {
    let tag = config.layout.tag_id;
    let sync = config.layout.sync.id;
    let k = config.ranges_per_sync();
    let interval_ps = (config.range_interval() * PICOS_PER_SECOND).round() as u64;
    let reply = config.reply_delay_s;
    for epoch in 0..config.epochs {
        let t0 = TrueTime::from_picos(epoch * interval_ps);
        sim.set_tag_position(trajectory.position_at(t0.as_seconds()));
        if epoch % k == 0 {
            let (_, rxs) = sim.transmit(tag, Some(sync), MessageKind::RangeReq, t0, epoch);
            let Some(req) = received_by(&rxs, sync) else {
                continue;
            };
            let sync_tx = enforce_reply_delay(req.true_rx_time, req.true_rx_time.plus_seconds(reply));
            let (_, rxs) = sim.broadcast(sync, MessageKind::Sync, sync_tx, epoch);
            let Some(at_tag) = received_by(&rxs, tag) else {
                continue;
            };
            let range_tx =
                enforce_reply_delay(at_tag.true_rx_time, at_tag.true_rx_time.plus_seconds(reply));
            sim.set_tag_position(trajectory.position_at(range_tx.as_seconds()));
            sim.broadcast(tag, MessageKind::Range, range_tx, epoch);
        } else {
            let range_tx = t0.plus_seconds(2.0 * reply);
            sim.set_tag_position(trajectory.position_at(range_tx.as_seconds()));
            sim.broadcast(tag, MessageKind::Range, range_tx, epoch);
        }
    }
}

fn run_twr(config: &ExperimentConfig, trajectory: &Trajectory, sim: &mut Simulator) {
    let tag = config.layout.tag_id;
    let interval_ps = (config.range_interval() * PICOS_PER_SECOND).round() as u64;
    let reply = config.reply_delay_s;
    let anchors = config.layout.anchor_ids();
    for epoch in 0..config.epochs {
        let mut t = TrueTime::from_picos(epoch * interval_ps);
        sim.set_tag_position(trajectory.position_at(t.as_seconds()));
        for &anchor in &anchors {
            let timeout = t.plus_seconds(4.0 * reply);
            let kinds = [
                (tag, anchor, MessageKind::Poll),
                (anchor, tag, MessageKind::PollAck),
                (tag, anchor, MessageKind::RangeFinal),
                (anchor, tag, MessageKind::RangeReport),
            ];
            let mut tx_at = t;
            let mut completed = true;
            for (i, &(from, to, kind)) in kinds.iter().enumerate() {
                let (_, rxs) = sim.transmit(from, Some(to), kind, tx_at, epoch);
                match received_by(&rxs, to) {
                    Some(rx) => {
                        if i + 1 < kinds.len() {
                            tx_at = enforce_reply_delay(
                                rx.true_rx_time,
                                rx.true_rx_time.plus_seconds(reply),
                            );
                        } else {
                            tx_at = rx.true_rx_time;
                        }
                    }
                    None => {
                        completed = false;
                        break;
                    }
                }
            }
            t = if completed {
                tx_at.plus_seconds(reply)
            } else {
                timeout.plus_seconds(reply)
            };
        }
    }
}
