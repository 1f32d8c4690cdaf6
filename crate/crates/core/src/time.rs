//! Simulator ground-truth time and quantized device timestamps.

use serde::{Deserialize, Serialize};

/// Device counter rate: a 38.4 MHz crystal multiplied up to 63.8976 GHz.
pub const DEFAULT_TICK_HZ: f64 = 63_897_600_000.0;

/// Period of one device tick, about 15.65 ps.
pub const DEFAULT_TICK_PERIOD: f64 = 1.0 / DEFAULT_TICK_HZ;

pub const PICOS_PER_SECOND: f64 = 1e12;

/// Wall-clock time inside the simulator, in integer picoseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
pub struct TrueTime {
    pub picoseconds: u64,
}

impl TrueTime {
    pub const ZERO: TrueTime = TrueTime { picoseconds: 0 };

    pub const fn from_picos(picoseconds: u64) -> Self {
        TrueTime { picoseconds }
    }

    /// Rounds to the nearest picosecond; negative inputs saturate at zero.
    pub fn from_seconds(seconds: f64) -> Self {
        TrueTime {
            picoseconds: (seconds * PICOS_PER_SECOND).round().max(0.0) as u64,
        }
    }

    pub fn as_seconds(&self) -> f64 {
        self.picoseconds as f64 / PICOS_PER_SECOND
    }

    pub fn plus_picos(self, picos: u64) -> Self {
        TrueTime::from_picos(self.picoseconds + picos)
    }

    pub fn plus_seconds(self, seconds: f64) -> Self {
        TrueTime::from_picos(self.picoseconds + (seconds * PICOS_PER_SECOND).round() as u64)
    }
}

/// A timestamp captured by a device counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceTime {
    pub ticks: u64,
    pub tick_period: f64,
}

impl DeviceTime {
    pub fn new(ticks: u64, tick_period: f64) -> Self {
        debug_assert!(tick_period > 0.0);
        DeviceTime { ticks, tick_period }
    }

    /// Quantizes a clock reading to the nearest tick. Readings below zero saturate at tick 0.
    pub fn from_seconds(seconds: f64, tick_period: f64) -> Self {
        DeviceTime {
            ticks: (seconds / tick_period).round().max(0.0) as u64,
            tick_period,
        }
    }

    pub fn as_seconds(&self) -> f64 {
        self.ticks as f64 * self.tick_period
    }

    /// `self - earlier` in seconds, computed on the integer counter.
    pub fn seconds_since(&self, earlier: &DeviceTime) -> f64 {
        (self.ticks as i128 - earlier.ticks as i128) as f64 * self.tick_period
    }
}
