//! Single-zone thermal simulator: an identified-form linear core plus
//! a bounded nonlinear perturbation, standing in for a full building
//! simulation. With the perturbation gain at zero the environment
//! coincides exactly with the linear surrogate, which is the regime
//! used for feasibility-by-construction checks.

use crate::error::{CoreError, Result};
use crate::sysid::LinearDynamics;
use nalgebra::{DMatrix, DVector};

pub const SIM_DT_SECS: u64 = 300;
/// Each control action is held for 3 simulation steps (15 minutes).
pub const SIM_STEPS_PER_CONTROL: usize = 3;
pub const SUPPLY_WATER_MIN: f64 = 20.0;
pub const SUPPLY_WATER_MAX: f64 = 65.0;

/// Occupied-hours window; weekends are unoccupied.
#[derive(Debug, Clone, Copy)]
pub struct OccupancySchedule {
    pub start_hour: f64,
    pub end_hour: f64,
}

impl Default for OccupancySchedule {
    fn default() -> Self {
        OccupancySchedule {
            start_hour: 8.0,
            end_hour: 18.0,
        }
    }
}

impl OccupancySchedule {
    /// `step` is a 5-minute simulation step index from the trace start
    /// (assumed to begin at midnight on a Sunday in the default trace).
    pub fn occupied(&self, occupancy_trace: &[f64], step: usize) -> bool {
        occupancy_trace[step.min(occupancy_trace.len() - 1)] > 0.5
    }
}

#[derive(Debug, Clone)]
pub struct ThermalZoneConfig {
    /// True linear core at the 5-minute simulation step.
    pub core: LinearDynamics,
    /// Bound on the nonlinear perturbation, degC per simulation step.
    pub g_max: f64,
    pub initial_temp: f64,
}

impl Default for ThermalZoneConfig {
    fn default() -> Self {
        ThermalZoneConfig {
            core: default_core(),
            g_max: 0.05,
            initial_temp: 21.0,
        }
    }
}

/// Default true dynamics at the 5-minute step: leakage to outdoors plus
/// coupling to the supply water loop; row sum is 1 so equal
/// temperatures are stationary.
pub fn default_core() -> LinearDynamics {
    LinearDynamics {
        a: DMatrix::from_element(1, 1, 0.94),
        b_u: DMatrix::from_element(1, 1, 0.045),
        b_d: DMatrix::from_element(1, 1, 0.015),
        dt_minutes: 5.0,
    }
}

#[derive(Debug, Clone)]
pub struct ThermalZone {
    cfg: ThermalZoneConfig,
    x: f64,
    sim_step: usize,
}

impl ThermalZone {
    pub fn new(cfg: ThermalZoneConfig) -> Self {
        let x = cfg.initial_temp;
        ThermalZone {
            cfg,
            x,
            sim_step: 0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.x
    }

    pub fn sim_step(&self) -> usize {
        self.sim_step
    }

    pub fn reset(&mut self) {
        self.x = self.cfg.initial_temp;
        self.sim_step = 0;
    }

    fn perturbation(&self, x: f64, w: f64) -> f64 {
        // Bounded, smooth in both arguments, zero when g_max = 0.
        self.cfg.g_max * ((w - x) / 15.0).tanh()
    }

    /// Advances 3 simulation steps holding `u`, reading the outdoor
    /// temperature from `weather` at the zone's own step counter.
    /// Returns the new zone temperature and the control cost (= u).
    pub fn step(&mut self, u: f64, weather: &[f64]) -> Result<(f64, f64)> {
        if !(SUPPLY_WATER_MIN..=SUPPLY_WATER_MAX).contains(&u) {
            return Err(CoreError::Contract(format!(
                "supply water temperature {u:.2} outside [{SUPPLY_WATER_MIN}, {SUPPLY_WATER_MAX}]"
            )));
        }
        for _ in 0..SIM_STEPS_PER_CONTROL {
            let w = weather[self.sim_step.min(weather.len() - 1)];
            let linear = self.cfg.core.step(
                &DVector::from_element(1, self.x),
                &DVector::from_element(1, u),
                &DVector::from_element(1, w),
            )[0];
            self.x = linear + self.perturbation(self.x, w);
            self.sim_step += 1;
            if !(0.0..=45.0).contains(&self.x) {
                return Err(CoreError::Contract(format!(
                    "zone temperature {:.2} left the plausible range [0, 45] at sim step {}",
                    self.x, self.sim_step
                )));
            }
        }
        Ok((self.x, u))
    }
}
