//! Split plant/controller execution over UDP.
//!
//! The plant node stands in for the engine controller: it paces cycles,
//! emits measurements and applies actuations, holding the last one when a
//! reply misses the compute budget. The controller node runs the NMPC.

pub mod node;
pub mod timing;
pub mod wire;

pub use node::{controller_node, plant_node, ControllerNodeConfig, ControllerRunLog, PlantNodeConfig, PlantRunLog};
pub use timing::{collect_timing, CycleClock, Distribution, TimingSample, TimingStats};
pub use wire::{decode, encode, ActuationMsg, HeartbeatMsg, MeasurementMsg, Message, Packet, WireError};
