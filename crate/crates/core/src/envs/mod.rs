//! Ground-truth simulators and disturbance traces.

pub mod feeder;
pub mod thermal;
pub mod traces;

pub use feeder::{synth_feeder, FeederStep, PfSolution, RadialFeeder};
pub use thermal::{OccupancySchedule, ThermalZone, ThermalZoneConfig};
pub use traces::TraceSet;
