//! Trace in, position fixes out.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use uwb_core::netsim::{EventTrace, EventType, MessageKind};
use uwb_core::scenario::{ExperimentConfig, Protocol};
use uwb_core::solver::{solve_tdoa_with, solve_twr, Measurements, SolveRequest, SolveResult};
use uwb_core::tdoa::{epochs_from_trace, SyncMode, TdoaError, TdoaMeasurement, TdoaProcessor};
use uwb_core::time::{DeviceTime, TrueTime};
use uwb_core::twr::{
    single_sided_tof, sds_tof, tof_to_range, RangeMeasurement, TwrExchange,
};
use uwb_core::{NodeId, Position};

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixStatus {
    Ok,
    Incomplete,
    InsufficientHistory,
    Ambiguous,
    SolverFailed,
}

/// One line of the positions CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub epoch: u64,
    pub status: FixStatus,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub residual: Option<f64>,
    pub iterations: Option<usize>,
    pub wall_time_us: Option<f64>,
}

impl PositionRow {
    fn failed(epoch: u64, status: FixStatus) -> Self {
        PositionRow {
            epoch,
            status,
            x: None,
            y: None,
            residual: None,
            iterations: None,
            wall_time_us: None,
        }
    }

    fn solved(epoch: u64, r: &SolveResult) -> Self {
        PositionRow {
            epoch,
            status: if r.ambiguous { FixStatus::Ambiguous } else { FixStatus::Ok },
            x: Some(r.position.x),
            y: Some(r.position.y),
            residual: Some(r.residual_norm),
            iterations: Some(r.iterations),
            wall_time_us: Some(r.wall_time * 1e6),
        }
    }

    pub fn position(&self) -> Option<Position> {
        match (self.x, self.y) {
            (Some(x), Some(y)) => Some(Position::new(x, y)),
            _ => None,
        }
    }
}

/// Where the tag really was when it ranged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub epoch: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Localization {
    pub rows: Vec<PositionRow>,
    pub truth: Vec<TruthRow>,
    pub tdoa: Vec<TdoaMeasurement>,
}

impl Localization {
    pub fn fixes(&self) -> usize {
        self.rows.iter().filter(|r| r.status == FixStatus::Ok).count()
    }
}

/// Ranges gathered from the TWR exchanges of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRanges {
    pub epoch: u64,
    pub ranges: Vec<RangeMeasurement>,
    pub missing: Vec<NodeId>,
    pub start: Option<TrueTime>,
}

#[derive(Debug, Default, Clone, Copy)]
struct ExchangeStamps {
    poll_tx: Option<u64>,
    poll_rx: Option<u64>,
    ack_tx: Option<u64>,
    ack_rx: Option<u64>,
    final_tx: Option<u64>,
    final_rx: Option<u64>,
    reported: bool,
}

fn check_protocol(config: &ExperimentConfig, trace: &EventTrace) -> Result<(), HarnessError> {
    let kinds = trace.tx_counts();
    let twr = kinds.keys().any(|k| k.is_twr());
    let tdoa = kinds.keys().any(|k| !k.is_twr());
    let ok = if config.protocol.is_tdoa() { !twr } else { !tdoa };
    if !ok {
        return Err(HarnessError::invalid(format!(
            "trace messages do not match protocol {}",
            config.protocol.name()
        )));
    }
    Ok(())
}

/// Turns each completed exchange into a (calibrated) range.
pub fn twr_ranges(config: &ExperimentConfig, trace: &EventTrace) -> Vec<EpochRanges> {
    let tag = config.layout.tag_id;
    let mut stamps: BTreeMap<(u64, NodeId), ExchangeStamps> = BTreeMap::new();
    let mut starts: BTreeMap<u64, TrueTime> = BTreeMap::new();
    for e in trace.events.iter().filter(|e| e.kind.is_twr()) {
        let anchor = if e.sender == tag {
            match e.receiver {
                Some(r) => r,
                None => continue,
            }
        } else {
            e.sender
        };
        if e.kind == MessageKind::Poll && e.event == EventType::Tx {
            let t = TrueTime::from_picos(e.true_ps);
            starts.entry(e.epoch).and_modify(|s| *s = (*s).min(t)).or_insert(t);
        }
        let s = stamps.entry((e.epoch, anchor)).or_default();
        let ticks = e.device_ticks;
        match (e.kind, e.event) {
            (MessageKind::Poll, EventType::Tx) => s.poll_tx = ticks,
            (MessageKind::Poll, EventType::Rx) => s.poll_rx = ticks,
            (MessageKind::PollAck, EventType::Tx) => s.ack_tx = ticks,
            (MessageKind::PollAck, EventType::Rx) => s.ack_rx = ticks,
            (MessageKind::RangeFinal, EventType::Tx) => s.final_tx = ticks,
            (MessageKind::RangeFinal, EventType::Rx) => s.final_rx = ticks,
            (MessageKind::RangeReport, EventType::Rx) => s.reported = true,
            _ => {}
        }
    }
    let span = |later: u64, earlier: u64| {
        DeviceTime::new(later, trace.tick_period).seconds_since(&DeviceTime::new(earlier, trace.tick_period))
    };
    let sds = config.protocol == Protocol::TwrSds;
    (0..config.epochs)
        .map(|epoch| {
            let mut ranges = Vec::new();
            let mut missing = Vec::new();
            for anchor in config.layout.anchor_ids() {
                let s = stamps.get(&(epoch, anchor)).copied().unwrap_or_default();
                let exchange = match (s.poll_tx, s.poll_rx, s.ack_tx, s.ack_rx, s.final_tx, s.final_rx) {
                    (Some(ptx), Some(prx), Some(atx), Some(arx), Some(ftx), Some(frx)) if s.reported => {
                        TwrExchange::double(span(arx, ptx), span(atx, prx), span(frx, atx), span(ftx, arx))
                    }
                    _ => {
                        missing.push(anchor);
                        continue;
                    }
                };
                let tof = if sds {
                    match sds_tof(&exchange) {
                        Ok(t) => t,
                        Err(_) => {
                            missing.push(anchor);
                            continue;
                        }
                    }
                } else {
                    single_sided_tof(&exchange)
                };
                let measured = tof_to_range(tof);
                ranges.push(match &config.calibration {
                    Some(model) => RangeMeasurement::calibrated(anchor, measured, epoch, model),
                    None => RangeMeasurement::new(anchor, measured, epoch),
                });
            }
            EpochRanges {
                epoch,
                ranges,
                missing,
                start: starts.get(&epoch).copied(),
            }
        })
        .collect()
}

fn nominal_time(config: &ExperimentConfig, epoch: u64) -> f64 {
    epoch as f64 * config.range_interval()
}

fn record(
    out: &mut Localization,
    prior: &mut Option<Position>,
    use_prior: bool,
    result: Result<(u64, SolveResult), PositionRow>,
) {
    let row = match result {
        Ok((epoch, r)) => {
            if use_prior && r.converged {
                *prior = Some(r.position);
            }
            PositionRow::solved(epoch, &r)
        }
        Err(row) => row,
    };
    out.rows.push(row);
}

/// Solves every epoch of a trace. Per-epoch failures become status rows.
pub fn localize(config: &ExperimentConfig, trace: &EventTrace) -> Result<Localization, HarnessError> {
    check_protocol(config, trace)?;
    let trajectory = config.trajectory();
    let mut out = Localization::default();
    let mut prior: Option<Position> = None;
    let method = config.solver.method;
    match config.protocol {
        Protocol::TdoaRaw | Protocol::TdoaKalman => {
            let mode = if config.protocol == Protocol::TdoaKalman {
                SyncMode::Kalman
            } else {
                SyncMode::Raw
            };
            let mut processor =
                TdoaProcessor::new(&config.layout, mode, config.kalman).with_degraded(config.allow_degraded);
            for e in epochs_from_trace(trace, &config.layout, config.epochs) {
                let t_truth = e
                    .range_tx
                    .map(|t| t.as_seconds())
                    .unwrap_or_else(|| nominal_time(config, e.epoch) + 2.0 * config.reply_delay_s);
                let p = trajectory.position_at(t_truth);
                out.truth.push(TruthRow { epoch: e.epoch, x: p.x, y: p.y });
                let result = match processor.process_epoch(e.epoch, e.sync.as_ref(), e.range.as_ref()) {
                    Ok(m) => {
                        out.tdoa.extend(m.iter().copied());
                        let req = SolveRequest::new(&config.layout, Measurements::Tdoa(m)).with_prior(prior);
                        solve_tdoa_with(&req, method)
                            .map(|r| (e.epoch, r))
                            .map_err(|_| PositionRow::failed(e.epoch, FixStatus::SolverFailed))
                    }
                    Err(TdoaError::InsufficientHistory(_)) => {
                        Err(PositionRow::failed(e.epoch, FixStatus::InsufficientHistory))
                    }
                    Err(TdoaError::IncompleteEpoch { .. }) | Err(TdoaError::MissingSyncRx(_)) => {
                        Err(PositionRow::failed(e.epoch, FixStatus::Incomplete))
                    }
                    Err(_) => Err(PositionRow::failed(e.epoch, FixStatus::SolverFailed)),
                };
                record(&mut out, &mut prior, config.solver.use_prior, result);
            }
        }
        Protocol::TwrSingle | Protocol::TwrSds => {
            let needed = if config.allow_degraded {
                2
            } else {
                config.layout.anchors.len()
            };
            for er in twr_ranges(config, trace) {
                let t = er
                    .start
                    .map(|t| t.as_seconds())
                    .unwrap_or_else(|| nominal_time(config, er.epoch));
                let p = trajectory.position_at(t);
                out.truth.push(TruthRow { epoch: er.epoch, x: p.x, y: p.y });
                let result = if er.ranges.len() < needed {
                    Err(PositionRow::failed(er.epoch, FixStatus::Incomplete))
                } else {
                    let req = SolveRequest::new(&config.layout, Measurements::Ranges(er.ranges)).with_prior(prior);
                    solve_twr(&req, method)
                        .map(|r| (er.epoch, r))
                        .map_err(|_| PositionRow::failed(er.epoch, FixStatus::SolverFailed))
                };
                record(&mut out, &mut prior, config.solver.use_prior, result);
            }
        }
    }
    Ok(out)
}

pub fn write_positions_csv<W: std::io::Write>(w: W, rows: &[PositionRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_positions_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<PositionRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

pub fn write_truth_csv<W: std::io::Write>(w: W, rows: &[TruthRow]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: std::io::Read>(r: R) -> csv::Result<Vec<TruthRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}
