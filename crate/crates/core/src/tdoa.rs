//! Forward TDoA: anchors re-express RANGE arrivals on the sync node's clock
//! and the differences between anchors feed the hyperbolic solver.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{
    estimate_skew, kf_predict, kf_update, ClockError, ClockKfParams, ClockKfState,
};
use crate::geometry::propagation_delay;
use crate::layout::{NodeId, SystemLayout};
use crate::netsim::{EventTrace, EventType, MessageKind};
use crate::time::{DeviceTime, TrueTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdoaError {
    #[error("anchor {0} has no SYNC stamp in this epoch")]
    MissingSyncRx(NodeId),
    #[error("not enough SYNC history for anchor {0}")]
    InsufficientHistory(NodeId),
    #[error("epoch {epoch} is missing stamps from anchors {missing:?}")]
    IncompleteEpoch { epoch: u64, missing: Vec<NodeId> },
    #[error("skew must be positive, got {0}")]
    NonPositiveSkew(f64),
    #[error(transparent)]
    Clock(#[from] ClockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Raw,
    Kalman,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncEpoch {
    pub epoch: u64,
    /// SYNC transmit time on the sync node's clock.
    pub t_sync_tx: f64,
    /// SYNC arrival per anchor, each on its own clock.
    pub rx: BTreeMap<NodeId, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeEpoch {
    pub epoch: u64,
    pub rx: BTreeMap<NodeId, f64>,
}

fn missing_from(rx: &BTreeMap<NodeId, f64>, anchors: &[NodeId]) -> Vec<NodeId> {
    anchors
        .iter()
        .filter(|a| !rx.contains_key(a))
        .copied()
        .collect()
}

impl SyncEpoch {
    pub fn missing(&self, anchors: &[NodeId]) -> Vec<NodeId> {
        missing_from(&self.rx, anchors)
    }
}

impl RangeEpoch {
    pub fn missing(&self, anchors: &[NodeId]) -> Vec<NodeId> {
        missing_from(&self.rx, anchors)
    }
}

/// `dt = t_k - t_l` with `anchor_k < anchor_l`; positive when the tag is
/// farther from `anchor_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdoaMeasurement {
    pub epoch: u64,
    pub anchor_k: NodeId,
    pub anchor_l: NodeId,
    #[serde(rename = "dt_seconds")]
    pub dt: f64,
}

impl TdoaMeasurement {
    pub fn reversed(&self) -> TdoaMeasurement {
        TdoaMeasurement {
            epoch: self.epoch,
            anchor_k: self.anchor_l,
            anchor_l: self.anchor_k,
            dt: -self.dt,
        }
    }
}

/// Flight time from the sync node to an anchor.
pub fn zeta(layout: &SystemLayout, anchor: NodeId) -> Option<f64> {
    layout
        .anchor_position(anchor)
        .map(|p| propagation_delay(layout.sync.position, p))
}

/// `(t_range_rx - t_sync_rx + zeta) / skew + t_sync_tx`.
pub fn adjust(t_range_rx: f64, t_sync_rx: f64, t_sync_tx: f64, skew: f64, zeta: f64) -> f64 {
    (t_range_rx - t_sync_rx + zeta) / skew + t_sync_tx
}

/// RANGE arrival at `anchor` expressed on the sync node's clock.
pub fn adjusted_arrival(
    t_range_rx: f64,
    sync: &SyncEpoch,
    skew: f64,
    zeta: f64,
    anchor: NodeId,
) -> Result<f64, TdoaError> {
    if !(skew > 0.0) {
        return Err(TdoaError::NonPositiveSkew(skew));
    }
    let t_sync_rx = *sync.rx.get(&anchor).ok_or(TdoaError::MissingSyncRx(anchor))?;
    Ok(adjust(t_range_rx, t_sync_rx, sync.t_sync_tx, skew, zeta))
}

/// Every unordered anchor pair once, lower id first.
pub fn pairwise_tdoa(adjusted: &BTreeMap<NodeId, f64>, epoch: u64) -> Vec<TdoaMeasurement> {
    let items: Vec<(NodeId, f64)> = adjusted.iter().map(|(&k, &v)| (k, v)).collect();
    let mut out = Vec::with_capacity(items.len() * items.len().saturating_sub(1) / 2);
    for (i, &(k, tk)) in items.iter().enumerate() {
        for &(l, tl) in &items[i + 1..] {
            out.push(TdoaMeasurement {
                epoch,
                anchor_k: k,
                anchor_l: l,
                dt: tk - tl,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SyncStamp {
    tx: f64,
    rx: f64,
}

#[derive(Debug, Clone, Default)]
struct AnchorTrack {
    prev: Option<SyncStamp>,
    last: Option<SyncStamp>,
    kf: Option<ClockKfState>,
    kf_updates: usize,
}

/// Per-anchor clock bookkeeping folded over the epochs of one run.
#[derive(Debug, Clone)]
pub struct TdoaProcessor {
    mode: SyncMode,
    anchors: Vec<NodeId>,
    zetas: BTreeMap<NodeId, f64>,
    params: ClockKfParams,
    tracks: BTreeMap<NodeId, AnchorTrack>,
    allow_degraded: bool,
}

impl TdoaProcessor {
    pub fn new(layout: &SystemLayout, mode: SyncMode, params: ClockKfParams) -> Self {
        let anchors = layout.anchor_ids();
        let zetas = anchors
            .iter()
            .map(|&a| (a, zeta(layout, a).expect("anchor in layout")))
            .collect();
        TdoaProcessor {
            mode,
            tracks: anchors.iter().map(|&a| (a, AnchorTrack::default())).collect(),
            anchors,
            zetas,
            params,
            allow_degraded: false,
        }
    }

    /// Solve from the anchors that did report, as long as three remain.
    pub fn with_degraded(mut self, allow: bool) -> Self {
        self.allow_degraded = allow;
        self
    }

    pub fn mode(&self) -> SyncMode {
        self.mode
    }

    /// Current filter state of an anchor, if any.
    pub fn filter_state(&self, anchor: NodeId) -> Option<&ClockKfState> {
        self.tracks.get(&anchor).and_then(|t| t.kf.as_ref())
    }

    /// Records the stamps of one SYNC broadcast. Anchors that missed it keep
    /// their previous history.
    pub fn observe_sync(&mut self, sync: &SyncEpoch) -> Result<(), TdoaError> {
        for (&anchor, &rx) in &sync.rx {
            let Some(track) = self.tracks.get_mut(&anchor) else {
                continue;
            };
            let stamp = SyncStamp {
                tx: sync.t_sync_tx,
                rx,
            };
            if let Some(last) = track.last {
                if self.mode == SyncMode::Kalman {
                    let skew = estimate_skew(last.rx, rx, last.tx, stamp.tx)?;
                    let state = track.kf.expect("filter started with the first SYNC");
                    let predicted = kf_predict(&state, stamp.tx - last.tx, &self.params);
                    track.kf = Some(kf_update(&predicted, rx, skew, &self.params)?);
                    track.kf_updates += 1;
                }
            } else if self.mode == SyncMode::Kalman {
                track.kf = Some(ClockKfState::initial(rx, &self.params));
            }
            track.prev = track.last;
            track.last = Some(stamp);
        }
        Ok(())
    }

    fn adjusted_for(&self, anchor: NodeId, t_range_rx: f64) -> Result<f64, TdoaError> {
        let track = &self.tracks[&anchor];
        let z = self.zetas[&anchor];
        let (Some(prev), Some(last)) = (track.prev, track.last) else {
            return Err(TdoaError::InsufficientHistory(anchor));
        };
        match self.mode {
            SyncMode::Raw => {
                let skew = estimate_skew(prev.rx, last.rx, prev.tx, last.tx)?;
                if !(skew > 0.0) {
                    return Err(TdoaError::NonPositiveSkew(skew));
                }
                Ok(adjust(t_range_rx, last.rx, last.tx, skew, z))
            }
            SyncMode::Kalman => {
                let kf = match track.kf {
                    Some(kf) if track.kf_updates > 0 => kf,
                    _ => return Err(TdoaError::InsufficientHistory(anchor)),
                };
                if !(kf.m_hat > 0.0) {
                    return Err(TdoaError::NonPositiveSkew(kf.m_hat));
                }
                Ok(adjust(t_range_rx, kf.t_hat, last.tx, kf.m_hat, z))
            }
        }
    }

    /// Turns one RANGE broadcast into pairwise differences using the
    /// current clock history.
    pub fn process_range(&self, range: &RangeEpoch) -> Result<Vec<TdoaMeasurement>, TdoaError> {
        let missing = range.missing(&self.anchors);
        if !missing.is_empty() && (!self.allow_degraded || self.anchors.len() - missing.len() < 3) {
            return Err(TdoaError::IncompleteEpoch {
                epoch: range.epoch,
                missing,
            });
        }
        let mut adjusted = BTreeMap::new();
        for &anchor in &self.anchors {
            let Some(&t) = range.rx.get(&anchor) else {
                continue;
            };
            adjusted.insert(anchor, self.adjusted_for(anchor, t)?);
        }
        Ok(pairwise_tdoa(&adjusted, range.epoch))
    }

    /// One protocol epoch: an optional SYNC followed by an optional RANGE.
    pub fn process_epoch(
        &mut self,
        epoch: u64,
        sync: Option<&SyncEpoch>,
        range: Option<&RangeEpoch>,
    ) -> Result<Vec<TdoaMeasurement>, TdoaError> {
        let mut sync_missing = Vec::new();
        if let Some(s) = sync {
            self.observe_sync(s)?;
            sync_missing = s.missing(&self.anchors);
        }
        let Some(range) = range else {
            return Err(TdoaError::IncompleteEpoch {
                epoch,
                missing: self.anchors.clone(),
            });
        };
        if !sync_missing.is_empty()
            && (!self.allow_degraded || self.anchors.len() - sync_missing.len() < 3)
        {
            return Err(TdoaError::IncompleteEpoch {
                epoch,
                missing: sync_missing,
            });
        }
        self.process_range(range)
    }
}

/// What one epoch of a trace contains from the TDoA point of view.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEpoch {
    pub epoch: u64,
    pub sync: Option<SyncEpoch>,
    pub range: Option<RangeEpoch>,
    /// True transmit time of the tag's RANGE.
    pub range_tx: Option<TrueTime>,
}

/// Groups SYNC and RANGE stamps by the epoch counter they carry.
pub fn epochs_from_trace(trace: &EventTrace, layout: &SystemLayout, epochs: u64) -> Vec<TraceEpoch> {
    let mut out: Vec<TraceEpoch> = (0..epochs)
        .map(|epoch| TraceEpoch {
            epoch,
            sync: None,
            range: None,
            range_tx: None,
        })
        .collect();
    let secs = |ticks: u64| DeviceTime::new(ticks, trace.tick_period).as_seconds();
    let is_anchor = |id: Option<NodeId>| id.is_some_and(|i| layout.anchor_position(i).is_some());
    for e in &trace.events {
        let Some(slot) = out.get_mut(e.epoch as usize) else {
            continue;
        };
        match (e.kind, e.event) {
            (MessageKind::Sync, EventType::Tx) if e.sender == layout.sync.id => {
                let tx = secs(e.device_ticks.unwrap_or_default());
                let s = slot.sync.get_or_insert_with(|| SyncEpoch {
                    epoch: e.epoch,
                    t_sync_tx: tx,
                    rx: BTreeMap::new(),
                });
                s.t_sync_tx = tx;
            }
            (MessageKind::Sync, EventType::Rx) if is_anchor(e.receiver) => {
                let s = slot.sync.get_or_insert_with(|| SyncEpoch {
                    epoch: e.epoch,
                    t_sync_tx: f64::NAN,
                    rx: BTreeMap::new(),
                });
                if let (Some(r), Some(t)) = (e.receiver, e.device_ticks) {
                    s.rx.insert(r, secs(t));
                }
            }
            (MessageKind::Range, EventType::Tx) if e.sender == layout.tag_id => {
                slot.range_tx = Some(TrueTime::from_picos(e.true_ps));
                slot.range.get_or_insert_with(|| RangeEpoch {
                    epoch: e.epoch,
                    rx: BTreeMap::new(),
                });
            }
            (MessageKind::Range, EventType::Rx) if is_anchor(e.receiver) => {
                let r = slot.range.get_or_insert_with(|| RangeEpoch {
                    epoch: e.epoch,
                    rx: BTreeMap::new(),
                });
                if let (Some(a), Some(t)) = (e.receiver, e.device_ticks) {
                    r.rx.insert(a, secs(t));
                }
            }
            _ => {}
        }
    }
    out
}

pub fn write_tdoa_csv<W: Write>(w: W, measurements: &[TdoaMeasurement]) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for m in measurements {
        wr.serialize(m)?;
    }
    wr.flush()?;
    Ok(())
}
