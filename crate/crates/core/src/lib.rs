//! Simulation and positioning core for UWB two-way ranging and forward TDoA
//! with a dedicated sync node.

pub mod clock;
pub mod geometry;
pub mod layout;
pub mod netsim;
pub mod scenario;
pub mod solver;
pub mod tdoa;
pub mod time;
pub mod twr;

pub use geometry::{distance, propagation_delay, Bounds, Position, SPEED_OF_LIGHT};
pub use layout::{NodeId, NodeRole, PlacedNode, SystemLayout};
pub use scenario::{ConfigError, ExperimentConfig, Protocol, Trajectory};
pub use time::{DeviceTime, TrueTime};
