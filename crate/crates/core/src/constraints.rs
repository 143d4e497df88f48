//! Construction of the time-varying approximate feasible set as a
//! [`LinearConstraintSet`].
//!
//! Building task: the planning-horizon polytope over supply-water
//! temperatures, obtained by substituting the linear surrogate forward
//! so every future state bound becomes a linear row over past actions.
//!
//! Feeder task: the joint inverter set -- active power caps, an
//! inscribed regular polygon inside each apparent-power disc (so
//! feasibility with respect to the true disc is preserved), and voltage
//! rows from the linearized grid model tightened by an empirically
//! estimated margin.

use crate::error::{CoreError, Result};
use crate::projection::LinearConstraintSet;
use crate::sysid::{LinearDynamics, PfOracle, SensitivityModel};
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_POLYGON_FACETS: usize = 8;
pub const MARGIN_SAFETY_FACTOR: f64 = 1.5;
/// Deadband outside occupied hours, degC.
pub const UNOCCUPIED_BAND: (f64, f64) = (18.0, 28.0);
/// Deadband during occupied hours, degC.
pub const OCCUPIED_BAND: (f64, f64) = (21.9, 25.5);

#[derive(Debug, Clone)]
pub struct HorizonSpec {
    /// Per-step zone temperature bounds for x_{k+1} .. x_{k+T}.
    pub state_bounds: Vec<(f64, f64)>,
    /// Per-step supply-water temperature bounds for u_k .. u_{k+T-1}.
    pub action_bounds: Vec<(f64, f64)>,
}

impl HorizonSpec {
    pub fn horizon(&self) -> usize {
        self.state_bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_bounds.is_empty() || self.state_bounds.len() != self.action_bounds.len() {
            return Err(CoreError::Contract(
                "horizon spec needs equal, nonzero state/action bound counts".into(),
            ));
        }
        for (lo, hi) in self.state_bounds.iter().chain(self.action_bounds.iter()) {
            if lo >= hi {
                return Err(CoreError::Contract(format!(
                    "empty bound interval [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InverterSpec {
    /// Rated apparent power, p.u.
    pub rating: f64,
    /// Available active power at this time step, p.u.
    pub p_available: f64,
    /// Absolute reactive-power limit, p.u. Utilities commonly cap
    /// inverter reactive output at a minimum power factor; the cap also
    /// keeps the set away from deep coherent-injection corners where a
    /// flat-start linearization is badly wrong.
    pub q_max: f64,
    /// Facet count of the inscribed polygon approximating the disc.
    pub facets: usize,
}

/// Reactive limit as a fraction of the rating, i.e. power factor 0.9.
pub const Q_LIMIT_FRAC: f64 = 0.44;

impl InverterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rating <= 0.0 || self.p_available < 0.0 || self.q_max <= 0.0 || self.facets < 4 {
            return Err(CoreError::Contract(format!(
                "invalid inverter spec: s={}, p_av={}, q_max={}, M={}",
                self.rating, self.p_available, self.q_max, self.facets
            )));
        }
        Ok(())
    }
}

/// Builds the horizon polytope over u_{k:k+T-1} for a scalar-state
/// linear surrogate. A bound on x_{k+l+1} becomes a row over
/// u_{k:k+l} by recursive substitution; there are no equality rows.
pub fn build_thermal_polytope(
    model: &LinearDynamics,
    x_k: f64,
    w_hat: &[f64],
    spec: &HorizonSpec,
) -> Result<LinearConstraintSet> {
    spec.validate()?;
    let t = spec.horizon();
    if w_hat.len() != t {
        return Err(CoreError::Contract(format!(
            "forecast length {} != horizon {t}",
            w_hat.len()
        )));
    }
    if model.n_state() != 1 || model.n_input() != 1 || model.n_disturbance() != 1 {
        return Err(CoreError::Contract(
            "thermal polytope builder expects a scalar surrogate".into(),
        ));
    }
    let a = model.a[(0, 0)];
    let bu = model.b_u[(0, 0)];
    let bd = model.b_d[(0, 0)];

    // 2T action rows + 2T state rows
    let mut g = DMatrix::zeros(4 * t, t);
    let mut h = DVector::zeros(4 * t);
    for l in 0..t {
        let (lo, hi) = spec.action_bounds[l];
        g[(2 * l, l)] = 1.0;
        h[2 * l] = hi;
        g[(2 * l + 1, l)] = -1.0;
        h[2 * l + 1] = -lo;
    }
    // x_{l+1} = a^{l+1} x_k + sum_{j<=l} a^{l-j} (bu u_j + bd w_j)
    let mut constant = x_k;
    let mut coeffs = vec![0.0; t];
    for l in 0..t {
        constant = a * constant + bd * w_hat[l];
        for c in coeffs.iter_mut().take(l) {
            *c *= a;
        }
        coeffs[l] = bu;
        let (lo, hi) = spec.state_bounds[l];
        let r = 2 * t + 2 * l;
        for j in 0..=l {
            g[(r, j)] = coeffs[j];
            g[(r + 1, j)] = -coeffs[j];
        }
        h[r] = hi - constant;
        h[r + 1] = constant - lo;
    }
    LinearConstraintSet::from_inequalities(g, h)
}

/// How a relaxation attempt widened the state bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationEvent {
    /// Number of 0.5 degC increments applied.
    pub increments: usize,
    /// True when only the tail half of the horizon was widened.
    pub tail_only: bool,
}

/// Thermal polytope with the documented infeasibility fallback: widen
/// state bounds in 0.5 degC increments (at most 4), trying the horizon
/// tail before the whole horizon at each level. Saturation on cold
/// mornings is the expected trigger.
pub fn build_thermal_polytope_relaxed(
    model: &LinearDynamics,
    x_k: f64,
    w_hat: &[f64],
    spec: &HorizonSpec,
) -> Result<(LinearConstraintSet, Option<RelaxationEvent>)> {
    match build_thermal_polytope(model, x_k, w_hat, spec) {
        Ok(set) => return Ok((set, None)),
        Err(CoreError::Infeasible { .. }) => {}
        Err(e) => return Err(e),
    }
    let t = spec.horizon();
    for increments in 1..=4usize {
        let slack = 0.5 * increments as f64;
        for tail_only in [true, false] {
            let from = if tail_only { t / 2 } else { 0 };
            let mut widened = spec.clone();
            for l in from..t {
                widened.state_bounds[l].0 -= slack;
                widened.state_bounds[l].1 += slack;
            }
            match build_thermal_polytope(model, x_k, w_hat, &widened) {
                Ok(set) => {
                    return Ok((
                        set,
                        Some(RelaxationEvent {
                            increments,
                            tail_only,
                        }),
                    ))
                }
                Err(CoreError::Infeasible { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
    }
    build_thermal_polytope(model, x_k, w_hat, spec).map(|s| (s, None))
}

/// Joint inverter feasible set over u = [p_1..p_I, q_1..q_I].
///
/// Rows: 0 <= p_i <= p_av_i; |q_i| <= q_max_i; M inscribed-polygon
/// facets per inverter approximating p^2 + q^2 <= s^2; and voltage rows
/// `v_min + eps <= v_bar + H (injection - reference) <= v_max - eps`
/// where the non-inverter loads enter the constant term.
pub fn build_inverter_set(
    model: &SensitivityModel,
    specs: &[InverterSpec],
    inverter_buses: &[usize],
    load_p: &DVector<f64>,
    load_q: &DVector<f64>,
    v_limits: (f64, f64),
) -> Result<LinearConstraintSet> {
    let n = model.n_bus();
    let n_inv = specs.len();
    if inverter_buses.len() != n_inv {
        return Err(CoreError::Contract(
            "one bus index per inverter spec required".into(),
        ));
    }
    if load_p.len() != n || load_q.len() != n {
        return Err(CoreError::Contract(format!(
            "load vectors must have bus count {n}"
        )));
    }
    for s in specs {
        s.validate()?;
    }
    let dim = 2 * n_inv;
    let total_facets: usize = specs.iter().map(|s| s.facets).sum();
    let n_rows = 4 * n_inv + total_facets + 2 * n;
    let mut g = DMatrix::zeros(n_rows, dim);
    let mut h = DVector::zeros(n_rows);
    let mut row = 0;

    for (i, s) in specs.iter().enumerate() {
        g[(row, i)] = 1.0;
        h[row] = s.p_available;
        row += 1;
        g[(row, i)] = -1.0;
        h[row] = 0.0;
        row += 1;
        g[(row, n_inv + i)] = 1.0;
        h[row] = s.q_max;
        row += 1;
        g[(row, n_inv + i)] = -1.0;
        h[row] = s.q_max;
        row += 1;
    }
    for (i, s) in specs.iter().enumerate() {
        let m = s.facets as f64;
        let offset = s.rating * (std::f64::consts::PI / m).cos();
        for j in 0..s.facets {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / m;
            g[(row, i)] = phi.cos();
            g[(row, n_inv + i)] = phi.sin();
            h[row] = offset;
            row += 1;
        }
    }

    // v_lin(u) = c0 + (H S) u with S the bus-selection of inverter
    // injections and c0 the voltage under loads alone.
    let mut inj_p = -load_p.clone();
    let mut inj_q = -load_q.clone();
    inj_p -= &model.p_bar;
    inj_q -= &model.q_bar;
    let mut du0 = DVector::zeros(2 * n);
    du0.rows_mut(0, n).copy_from(&inj_p);
    du0.rows_mut(n, n).copy_from(&inj_q);
    let c0 = &model.v_bar + &model.h * du0;
    // H S: column i is H's column for bus(i) active power, column
    // n_inv + i the reactive counterpart.
    let mut hs = DMatrix::zeros(n, dim);
    for (i, &bus) in inverter_buses.iter().enumerate() {
        hs.column_mut(i).copy_from(&model.h.column(bus));
        hs.column_mut(n_inv + i).copy_from(&model.h.column(n + bus));
    }
    let (v_lo, v_hi) = v_limits;
    let eps = model.eps_v;
    for b in 0..n {
        for j in 0..dim {
            g[(row, j)] = hs[(b, j)];
            g[(row + 1, j)] = -hs[(b, j)];
        }
        h[row] = (v_hi - eps) - c0[b];
        h[row + 1] = c0[b] - (v_lo + eps);
        row += 2;
    }
    debug_assert_eq!(row, n_rows);
    LinearConstraintSet::from_inequalities(g, h).map_err(|e| match e {
        CoreError::Infeasible { slack, tol } => CoreError::Contract(format!(
            "inverter set infeasible (phase-1 slack {slack:.3e} > {tol:.3e}); \
             consider a smaller voltage margin than {eps:.4}"
        )),
        other => other,
    })
}

/// Empirical voltage margin: the worst observed gap between the AC
/// solution and the linear prediction over candidate injections that
/// the linear model itself deems within limits, scaled by a safety
/// factor. Divergent power-flow samples are skipped.
pub fn voltage_margin(
    model: &SensitivityModel,
    pf: &PfOracle,
    candidates: &[(DVector<f64>, DVector<f64>)],
    v_limits: (f64, f64),
    safety_factor: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut valid = 0usize;
    for (p, q) in candidates {
        let v_lin = model.predict(p, q);
        // tolerance keeps candidates that sit exactly on a limit, as
        // projected dispatches do up to solver round-off
        if v_lin.min() < v_limits.0 - 1e-6 || v_lin.max() > v_limits.1 + 1e-6 {
            continue;
        }
        let v_ac = match pf(p, q) {
            Ok(v) => v,
            Err(_) => continue, // divergent sample: skip
        };
        worst = worst.max((v_ac - v_lin).amax());
        valid += 1;
    }
    if valid < 10 {
        return Err(CoreError::MarginEstimation {
            required: 10,
            valid,
        });
    }
    Ok(safety_factor * worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_model(a: f64, bu: f64, bd: f64) -> LinearDynamics {
        LinearDynamics {
            a: DMatrix::from_element(1, 1, a),
            b_u: DMatrix::from_element(1, 1, bu),
            b_d: DMatrix::from_element(1, 1, bd),
            dt_minutes: 15.0,
        }
    }

    fn spec(t: usize, x: (f64, f64), u: (f64, f64)) -> HorizonSpec {
        HorizonSpec {
            state_bounds: vec![x; t],
            action_bounds: vec![u; t],
        }
    }

    #[test]
    fn one_step_integrator_polytope() {
        // x+ = x + u, x=0, X=[-1,1], U=[-2,2] -> feasible u is [-1,1]
        let m = scalar_model(1.0, 1.0, 0.0);
        let set =
            build_thermal_polytope(&m, 0.0, &[0.0], &spec(1, (-1.0, 1.0), (-2.0, 2.0))).unwrap();
        assert!(set.contains(&DVector::from_vec(vec![0.99]), 1e-9));
        assert!(!set.contains(&DVector::from_vec(vec![1.01]), 1e-9));
        assert!(!set.contains(&DVector::from_vec(vec![-1.01]), 1e-9));
    }

    #[test]
    fn two_step_rows_match_symbolic_expansion() {
        // brute-force: u in set iff simulating the surrogate keeps every
        // x within bounds and u within the action box
        let m = scalar_model(0.9, 0.5, 0.1);
        let sp = spec(2, (-1.0, 1.0), (-2.0, 2.0));
        let w = [0.3, -0.2];
        let set = build_thermal_polytope(&m, 0.4, &w, &sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let u = [rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)];
            let mut x = 0.4;
            let mut feasible = true;
            for l in 0..2 {
                if !(sp.action_bounds[l].0..=sp.action_bounds[l].1).contains(&u[l]) {
                    feasible = false;
                }
                x = 0.9 * x + 0.5 * u[l] + 0.1 * w[l];
                if !(sp.state_bounds[l].0..=sp.state_bounds[l].1).contains(&x) {
                    feasible = false;
                }
            }
            let in_set = set.contains(&DVector::from_vec(u.to_vec()), 1e-9);
            // skip samples sitting exactly on a boundary
            if feasible != in_set {
                panic!("membership mismatch at u={u:?}: sim says {feasible}, rows say {in_set}");
            }
        }
    }

    #[test]
    fn hot_start_is_feasible_through_decay() {
        // x above the band, stable A, w = 0: coasting at u_min cools
        let m = scalar_model(0.9, 0.05, 0.0);
        let sp = HorizonSpec {
            state_bounds: vec![(18.0, 28.0); 8],
            action_bounds: vec![(20.0, 65.0); 8],
        };
        let set = build_thermal_polytope(&m, 29.0, &[0.0; 8], &sp).unwrap();
        assert!(set.dim() == 8);
        assert!(set.contains(set.feasible_point(), 1e-6));
    }

    #[test]
    fn sampled_points_keep_surrogate_within_bounds() {
        // one 15-min control step = three 5-min steps of the fine model
        let (a, bu, bd) = (0.8306, 0.127, 0.0424);
        let m = scalar_model(a, bu, bd);
        let sp = HorizonSpec {
            state_bounds: vec![(18.0, 28.0), (18.0, 28.0), (21.9, 25.5), (21.9, 25.5)],
            action_bounds: vec![(20.0, 65.0); 4],
        };
        let w = [0.0, 2.0, -1.0, 0.5];
        let set = build_thermal_polytope(&m, 20.0, &w, &sp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let raw = DVector::from_fn(4, |_, _| rng.gen_range(0.0..80.0));
            let u = project(&raw, &set, 1e-9).unwrap().u_star;
            let mut x = 20.0;
            for l in 0..4 {
                x = a * x + bu * u[l] + bd * w[l];
                assert!(
                    x >= sp.state_bounds[l].0 - 1e-6 && x <= sp.state_bounds[l].1 + 1e-6,
                    "state {x} outside bounds at step {l}"
                );
            }
        }
    }

    #[test]
    fn widening_deadband_never_shrinks_the_set() {
        let m = scalar_model(0.94, 0.045, 0.015);
        let narrow = spec(3, (21.9, 25.5), (20.0, 65.0));
        let mut wide = narrow.clone();
        for b in &mut wide.state_bounds {
            b.0 -= 1.0;
            b.1 += 1.0;
        }
        let w = [0.0; 3];
        let set_n = build_thermal_polytope(&m, 23.0, &w, &narrow).unwrap();
        let set_w = build_thermal_polytope(&m, 23.0, &w, &wide).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let u = DVector::from_fn(3, |_, _| rng.gen_range(15.0..70.0));
            if set_n.contains(&u, 1e-9) {
                assert!(set_w.contains(&u, 1e-9));
            }
        }
    }

    #[test]
    fn relaxation_fallback_reports_event() {
        // frozen start far below a tight band: infeasible without slack
        let m = scalar_model(0.94, 0.1, 0.0);
        let sp = spec(2, (21.9, 25.5), (20.0, 65.0));
        let (set, event) =
            build_thermal_polytope_relaxed(&m, 15.0, &[0.0, 0.0], &sp).unwrap();
        // full heat reaches 20.6 after one step: three 0.5 degC
        // increments on the whole horizon are needed
        assert_eq!(
            event,
            Some(RelaxationEvent {
                increments: 3,
                tail_only: false
            })
        );
        assert!(set.contains(set.feasible_point(), 1e-6));
    }

    fn toy_sensitivity(n: usize, gain: f64) -> SensitivityModel {
        // v_i responds to its own bus injections only
        let mut h = DMatrix::zeros(n, 2 * n);
        for i in 0..n {
            h[(i, i)] = gain;
            h[(i, n + i)] = gain * 0.5;
        }
        SensitivityModel {
            v_bar: DVector::from_element(n, 1.0),
            p_bar: DVector::zeros(n),
            q_bar: DVector::zeros(n),
            h,
            eps_v: 0.0,
        }
    }

    #[test]
    fn zero_everything_contains_origin() {
        let model = toy_sensitivity(2, 0.05);
        let specs = vec![InverterSpec {
            rating: 1.0,
            p_available: 0.0,
            q_max: 1.0,
            facets: 8,
        }];
        let set = build_inverter_set(
            &model,
            &specs,
            &[0],
            &DVector::zeros(2),
            &DVector::zeros(2),
            (0.95, 1.05),
        )
        .unwrap();
        assert!(set.contains(&DVector::zeros(2), 1e-9));
    }

    #[test]
    fn inscribed_polygon_is_conservative() {
        // (p, q) = (1, 0) is on the true disc s=1 but outside the
        // inscribed square (M=4): p <= cos(pi/4)
        let model = toy_sensitivity(1, 1e-6);
        let specs = vec![InverterSpec {
            rating: 1.0,
            p_available: 1.0,
            q_max: 1.0,
            facets: 4,
        }];
        let set = build_inverter_set(
            &model,
            &specs,
            &[0],
            &DVector::zeros(1),
            &DVector::zeros(1),
            (0.0, 2.0),
        )
        .unwrap();
        let on_disc = DVector::from_vec(vec![1.0, 0.0]);
        assert!(!set.contains(&on_disc, 1e-9));
        let inside = DVector::from_vec(vec![0.7, 0.0]);
        assert!(set.contains(&inside, 1e-9));
        // polygon members satisfy the true disc
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-1.2..1.2));
            if set.contains(&u, 1e-9) {
                assert!(u[0] * u[0] + u[1] * u[1] <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn binding_voltage_row_reproduces_limit() {
        // single bus, v = 1 + 0.05 p (no q sensitivity); pushing p as
        // high as possible pins the linear voltage at exactly 1.05
        let mut model = toy_sensitivity(1, 0.05);
        model.h[(0, 1)] = 0.0;
        let specs = vec![InverterSpec {
            rating: 2.0,
            p_available: 2.0,
            q_max: 2.0,
            facets: 32,
        }];
        let set = build_inverter_set(
            &model,
            &specs,
            &[0],
            &DVector::zeros(1),
            &DVector::zeros(1),
            (0.95, 1.05),
        )
        .unwrap();
        let sol = project(&DVector::from_vec(vec![5.0, 0.0]), &set, 1e-10).unwrap();
        let v = 1.0 + 0.05 * sol.u_star[0];
        assert!((v - 1.05).abs() < 1e-8, "v = {v}");
    }

    #[test]
    fn margin_zero_against_linear_oracle_and_monotone() {
        let model = toy_sensitivity(2, 0.02);
        let pf_linear = |p: &DVector<f64>, q: &DVector<f64>| Ok(model.predict(p, q));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let narrow: Vec<(DVector<f64>, DVector<f64>)> = (0..30)
            .map(|_| {
                (
                    DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5)),
                    DVector::zeros(2),
                )
            })
            .collect();
        let eps =
            voltage_margin(&model, &pf_linear, &narrow, (0.9, 1.1), 1.5).unwrap();
        assert_eq!(eps, 0.0);

        // nonlinear oracle: quadratic correction grows with injection size
        let pf_quad = |p: &DVector<f64>, q: &DVector<f64>| {
            let mut v = model.predict(p, q);
            for i in 0..v.len() {
                v[i] += 0.01 * p[i] * p[i];
            }
            Ok(v)
        };
        let wide: Vec<(DVector<f64>, DVector<f64>)> = narrow
            .iter()
            .map(|(p, q)| (p * 2.0, q.clone()))
            .collect();
        let e1 = voltage_margin(&model, &pf_quad, &narrow, (0.9, 1.1), 1.5).unwrap();
        let e2 = voltage_margin(&model, &pf_quad, &wide, (0.9, 1.1), 1.5).unwrap();
        assert!(e2 >= e1);
    }

    #[test]
    fn too_few_valid_samples_is_an_error() {
        let model = toy_sensitivity(1, 0.05);
        let pf = |_: &DVector<f64>, _: &DVector<f64>| -> crate::Result<DVector<f64>> {
            Err(CoreError::PowerFlowDiverged {
                iterations: 50,
                residual: 1.0,
            })
        };
        let cands = vec![(DVector::zeros(1), DVector::zeros(1)); 20];
        match voltage_margin(&model, &pf, &cands, (0.9, 1.1), 1.5) {
            Err(CoreError::MarginEstimation { valid, .. }) => assert_eq!(valid, 0),
            other => panic!("expected margin estimation error, got {other:?}"),
        }
    }
}
