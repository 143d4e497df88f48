//! Reference controllers: proportional heating control for the
//! building, Volt/Var droop and the linearized-optimal QP dispatch for
//! the feeder.

use crate::error::{CoreError, Result};
use crate::projection::LinearConstraintSet;
use crate::qp::{solve_qp, QpProblem};
use nalgebra::{DMatrix, DVector};

/// Supply-water command from zone temperature error:
/// `u = clamp(u_min + gain * max(setpoint - x, 0), u_min, u_max)`.
pub fn p_controller(x: f64, setpoint: f64, gain: f64, u_bounds: (f64, f64)) -> f64 {
    assert!(gain > 0.0, "gain must be positive");
    let (u_min, u_max) = u_bounds;
    (u_min + gain * (setpoint - x).max(0.0)).clamp(u_min, u_max)
}

/// Piecewise-linear voltage to reactive-power map with a central
/// deadband: full injection `+q_max` at or below `v1`, zero on
/// `[v2, v3]`, full absorption `-q_max` at or above `v4`.
#[derive(Debug, Clone, Copy)]
pub struct DroopCurve {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    pub v4: f64,
    /// Fraction of the inverter rating available for reactive power.
    pub q_max_ratio: f64,
}

impl Default for DroopCurve {
    fn default() -> Self {
        DroopCurve {
            v1: 0.92,
            v2: 0.98,
            v3: 1.02,
            v4: 1.08,
            q_max_ratio: 0.44,
        }
    }
}

impl DroopCurve {
    pub fn validate(&self) -> Result<()> {
        if !(self.v1 < self.v2 && self.v2 <= self.v3 && self.v3 < self.v4) {
            return Err(CoreError::Contract(format!(
                "droop breakpoints must satisfy v1 < v2 <= v3 < v4, got {} {} {} {}",
                self.v1, self.v2, self.v3, self.v4
            )));
        }
        if !(0.0..=1.0).contains(&self.q_max_ratio) {
            return Err(CoreError::Contract(
                "q_max ratio must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn q_of(&self, v: f64, s: f64) -> f64 {
        let q_max = self.q_max_ratio * s;
        if v <= self.v1 {
            q_max
        } else if v < self.v2 {
            q_max * (self.v2 - v) / (self.v2 - self.v1)
        } else if v <= self.v3 {
            0.0
        } else if v < self.v4 {
            -q_max * (v - self.v3) / (self.v4 - self.v3)
        } else {
            -q_max
        }
    }
}

/// Local Volt/Var control: active power is never curtailed; reactive
/// power follows the droop curve, with the pair clipped onto the
/// apparent-power disc.
pub fn volt_var(v_local: f64, curve: &DroopCurve, p_av: f64, s: f64) -> (f64, f64) {
    let p = p_av;
    let q = curve.q_of(v_local, s);
    let norm = (p * p + q * q).sqrt();
    if norm <= s || norm == 0.0 {
        (p, q)
    } else {
        (p * s / norm, q * s / norm)
    }
}

/// Minimizes total curtailment `sum(p_av - p)` over the same
/// constraint set the learned policy projects onto, through the same
/// QP machinery with a vanishing quadratic term.
pub fn linearized_optimal(
    set: &LinearConstraintSet,
    n_inverters: usize,
    tol: f64,
) -> Result<DVector<f64>> {
    let n = set.dim();
    if n != 2 * n_inverters {
        return Err(CoreError::Contract(format!(
            "set dimension {n} != 2 x {n_inverters} inverters"
        )));
    }
    // the quadratic term regularizes an otherwise degenerate LP; its
    // bias on the optimizer is of the same order as its weight
    let q = DMatrix::identity(n, n) * 1e-6;
    let mut c = DVector::zeros(n);
    for i in 0..n_inverters {
        c[i] = -1.0; // maximize delivered active power
    }
    let problem = QpProblem {
        q: &q,
        c: &c,
        a: set.a(),
        b: set.b(),
        g: set.g(),
        h: set.h(),
    };
    // degenerate vertices (duplicate active rows) can stall the
    // interior point at residuals just above a tight tolerance
    let mut err = None;
    for relax in 0..3 {
        match solve_qp(&problem, tol * 10f64.powi(relax)) {
            Ok(sol) => return Ok(sol.x),
            Err(e) => err = Some(e),
        }
    }
    Err(err.unwrap())
}
