//! Radial distribution feeder with full Newton-Raphson AC power flow.
//!
//! Buses are indexed with the slack at 0 and `n_bus` PQ buses after it;
//! all injection vectors are over the PQ buses only, in per-unit on a
//! single MVA base. Positive injections are generation.

use crate::error::{CoreError, Result};
use crate::rng;
use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;

pub const PF_TOL: f64 = 1e-10;
pub const PF_MAX_ITER: usize = 50;
pub const V_MIN: f64 = 0.95;
pub const V_MAX: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone)]
pub struct RadialFeeder {
    /// Number of PQ buses (slack excluded).
    pub n_bus: usize,
    pub edges: Vec<Edge>,
    pub slack_voltage: f64,
    /// PQ-bus indices (0-based) hosting PV inverters.
    pub pv_buses: Vec<usize>,
    /// Rated apparent power of each inverter, p.u.
    pub pv_rating: Vec<f64>,
    /// DC capacity of each PV system, p.u.; available power is
    /// capacity x irradiance.
    pub pv_capacity: Vec<f64>,
    /// Nominal active load per PQ bus, p.u.; the trace multiplies it.
    pub load_nominal: Vec<f64>,
    /// Reactive load as a fraction of active load.
    pub load_q_ratio: f64,
    ybus: DMatrix<Complex<f64>>,
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    /// Voltage magnitude at each PQ bus, p.u.
    pub v_mag: DVector<f64>,
    /// Voltage angle at each PQ bus, radians.
    pub v_ang: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct FeederStep {
    pub v_mag: DVector<f64>,
    /// Sum over inverters of (available - dispatched) active power.
    pub curtailment: f64,
    /// Buses with voltage outside [0.95, 1.05].
    pub violations: usize,
}

impl RadialFeeder {
    pub fn new(
        n_bus: usize,
        edges: Vec<Edge>,
        pv_buses: Vec<usize>,
        pv_rating: Vec<f64>,
        pv_capacity: Vec<f64>,
        load_nominal: Vec<f64>,
    ) -> Result<Self> {
        if edges.len() != n_bus {
            return Err(CoreError::Contract(format!(
                "a radial tree over {} PQ buses needs exactly {} edges, got {}",
                n_bus,
                n_bus,
                edges.len()
            )));
        }
        for e in &edges {
            if e.r <= 0.0 || e.x <= 0.0 {
                return Err(CoreError::Contract("non-positive line impedance".into()));
            }
        }
        // tree check: every PQ bus reachable from the slack
        let mut reach = vec![false; n_bus + 1];
        reach[0] = true;
        for _ in 0..=n_bus {
            for e in &edges {
                if reach[e.from] {
                    reach[e.to] = true;
                }
                if reach[e.to] {
                    reach[e.from] = true;
                }
            }
        }
        if reach.iter().any(|&r| !r) {
            return Err(CoreError::Contract("feeder graph is not connected".into()));
        }
        let ybus = build_ybus(n_bus + 1, &edges);
        Ok(RadialFeeder {
            n_bus,
            edges,
            slack_voltage: 1.0,
            pv_buses,
            pv_rating,
            pv_capacity,
            load_nominal,
            load_q_ratio: 0.33,
            ybus,
        })
    }

    pub fn n_pv(&self) -> usize {
        self.pv_buses.len()
    }

    /// Newton-Raphson solution of the AC power-flow equations for the
    /// given PQ-bus injections.
    pub fn solve_powerflow(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<PfSolution> {
        let n = self.n_bus;
        assert_eq!(p.len(), n);
        assert_eq!(q.len(), n);
        if !p.iter().chain(q.iter()).all(|v| v.is_finite()) {
            return Err(CoreError::Contract("non-finite injections".into()));
        }
        // flat start
        let nb = n + 1;
        let mut vm = DVector::from_element(nb, self.slack_voltage);
        let mut va = DVector::zeros(nb);
        let g = self.ybus.map(|y| y.re);
        let b = self.ybus.map(|y| y.im);

        let mut residual = f64::INFINITY;
        for iter in 0..PF_MAX_ITER {
            // calculated injections at PQ buses
            let mut pc = DVector::zeros(nb);
            let mut qc = DVector::zeros(nb);
            for i in 0..nb {
                let mut pi = 0.0;
                let mut qi = 0.0;
                for j in 0..nb {
                    let gij = g[(i, j)];
                    let bij = b[(i, j)];
                    if gij == 0.0 && bij == 0.0 {
                        continue;
                    }
                    let th: f64 = va[i] - va[j];
                    let (s, c) = th.sin_cos();
                    pi += vm[j] * (gij * c + bij * s);
                    qi += vm[j] * (gij * s - bij * c);
                }
                pc[i] = vm[i] * pi;
                qc[i] = vm[i] * qi;
            }
            let mut mismatch = DVector::zeros(2 * n);
            for i in 0..n {
                mismatch[i] = pc[i + 1] - p[i];
                mismatch[n + i] = qc[i + 1] - q[i];
            }
            residual = mismatch.amax();
            if residual <= PF_TOL {
                return Ok(PfSolution {
                    v_mag: vm.rows(1, n).into_owned(),
                    v_ang: va.rows(1, n).into_owned(),
                    iterations: iter,
                    residual,
                });
            }

            // Jacobian over PQ unknowns (theta, V)
            let mut jac = DMatrix::zeros(2 * n, 2 * n);
            for i in 0..n {
                let bi = i + 1;
                for jj in 0..n {
                    let bj = jj + 1;
                    let gij = g[(bi, bj)];
                    let bij = b[(bi, bj)];
                    if bi != bj {
                        if gij == 0.0 && bij == 0.0 {
                            continue;
                        }
                        let th: f64 = va[bi] - va[bj];
                        let (s, c) = th.sin_cos();
                        let dp_dth = vm[bi] * vm[bj] * (gij * s - bij * c);
                        let dp_dv = vm[bi] * (gij * c + bij * s);
                        let dq_dth = -vm[bi] * vm[bj] * (gij * c + bij * s);
                        let dq_dv = vm[bi] * (gij * s - bij * c);
                        jac[(i, jj)] = dp_dth;
                        jac[(i, n + jj)] = dp_dv;
                        jac[(n + i, jj)] = dq_dth;
                        jac[(n + i, n + jj)] = dq_dv;
                    } else {
                        jac[(i, i)] = -qc[bi] - bij * vm[bi] * vm[bi];
                        jac[(i, n + i)] = pc[bi] / vm[bi] + gij * vm[bi];
                        jac[(n + i, i)] = pc[bi] - gij * vm[bi] * vm[bi];
                        jac[(n + i, n + i)] = qc[bi] / vm[bi] - bij * vm[bi];
                    }
                }
            }
            let step = jac.lu().solve(&(-mismatch)).ok_or({
                CoreError::PowerFlowDiverged {
                    iterations: iter,
                    residual,
                }
            })?;
            for i in 0..n {
                va[i + 1] += step[i];
                vm[i + 1] += step[n + i];
                if vm[i + 1] <= 0.0 || !vm[i + 1].is_finite() {
                    return Err(CoreError::PowerFlowDiverged {
                        iterations: iter,
                        residual,
                    });
                }
            }
        }
        Err(CoreError::PowerFlowDiverged {
            iterations: PF_MAX_ITER,
            residual,
        })
    }

    /// Per-bus complex power balance residual, computed directly from
    /// the admittance matrix rather than the solver internals.
    pub fn power_balance_residual(
        &self,
        sol: &PfSolution,
        p: &DVector<f64>,
        q: &DVector<f64>,
    ) -> f64 {
        let n = self.n_bus;
        let nb = n + 1;
        let mut v = DVector::from_element(nb, Complex::new(self.slack_voltage, 0.0));
        for i in 0..n {
            v[i + 1] = Complex::from_polar(sol.v_mag[i], sol.v_ang[i]);
        }
        let iv = &self.ybus * &v;
        let mut worst = 0.0_f64;
        for i in 0..n {
            let s = v[i + 1] * iv[i + 1].conj();
            worst = worst
                .max((s.re - p[i]).abs())
                .max((s.im - q[i]).abs());
        }
        worst
    }

    /// Applies inverter setpoints on top of exogenous loads, solves the
    /// AC power flow, and reports curtailment and voltage violations.
    /// `p_set`/`q_set`/`p_av` are per inverter; `load_p`/`load_q` per
    /// PQ bus (consumption, positive).
    pub fn feeder_step(
        &self,
        p_set: &DVector<f64>,
        q_set: &DVector<f64>,
        p_av: &DVector<f64>,
        load_p: &DVector<f64>,
        load_q: &DVector<f64>,
    ) -> Result<FeederStep> {
        let n_pv = self.n_pv();
        assert_eq!(p_set.len(), n_pv);
        for i in 0..n_pv {
            // the constraint set enforces p <= p_av; a violation here is a bug upstream
            if p_set[i] > p_av[i] + 1e-6 {
                return Err(CoreError::Contract(format!(
                    "inverter {i} dispatched {:.6} above available {:.6}",
                    p_set[i], p_av[i]
                )));
            }
        }
        let mut p = -load_p.clone();
        let mut q = -load_q.clone();
        for (k, &bus) in self.pv_buses.iter().enumerate() {
            p[bus] += p_set[k];
            q[bus] += q_set[k];
        }
        let sol = self.solve_powerflow(&p, &q)?;
        let violations = sol
            .v_mag
            .iter()
            .filter(|&&v| !(V_MIN..=V_MAX).contains(&v))
            .count();
        let curtailment = (0..n_pv).map(|i| p_av[i] - p_set[i]).sum();
        Ok(FeederStep {
            v_mag: sol.v_mag,
            curtailment,
            violations,
        })
    }

    /// Available PV power per inverter for a given irradiance level.
    pub fn available_power(&self, irradiance: f64) -> DVector<f64> {
        DVector::from_fn(self.n_pv(), |i, _| self.pv_capacity[i] * irradiance)
    }

    /// Per-bus loads for a slice of the load trace multipliers.
    pub fn loads_at(&self, multipliers: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let p = DVector::from_fn(self.n_bus, |i, _| self.load_nominal[i] * multipliers[i]);
        let q = &p * self.load_q_ratio;
        (p, q)
    }
}

fn build_ybus(nb: usize, edges: &[Edge]) -> DMatrix<Complex<f64>> {
    let mut y = DMatrix::from_element(nb, nb, Complex::new(0.0, 0.0));
    for e in edges {
        let ys = Complex::new(1.0, 0.0) / Complex::new(e.r, e.x);
        y[(e.from, e.from)] += ys;
        y[(e.to, e.to)] += ys;
        y[(e.from, e.to)] -= ys;
        y[(e.to, e.from)] -= ys;
    }
    y
}

pub const SYNTH_N_BUS: usize = 36;
pub const SYNTH_N_PV: usize = 21;

/// Documented synthetic radial feeder: an 18-bus trunk with three
/// 6-bus laterals, 36 PQ buses and 21 PV systems biased toward the
/// feeder end so heavy export produces the over-voltage mechanism.
/// Impedances and PV/load sizes are drawn deterministically per seed.
pub fn synth_feeder(seed: u64) -> RadialFeeder {
    let mut rng = rng::stream(seed, "feeder/topology");
    let mut edges = Vec::with_capacity(SYNTH_N_BUS);
    // trunk: slack(0) -> 1 -> 2 -> ... -> 18
    for bus in 1..=18 {
        edges.push(Edge {
            from: bus - 1,
            to: bus,
            r: rng.gen_range(0.006..0.016),
            x: rng.gen_range(0.004..0.011),
        });
    }
    // laterals: 19-24 off bus 9, 25-30 off bus 14, 31-36 off bus 18
    for (start, root) in [(19usize, 9usize), (25, 14), (31, 18)] {
        for k in 0..6 {
            let to = start + k;
            let from = if k == 0 { root } else { to - 1 };
            edges.push(Edge {
                from,
                to,
                r: rng.gen_range(0.006..0.016),
                x: rng.gen_range(0.004..0.011),
            });
        }
    }
    // PV biased toward the feeder end (0-based PQ indices = bus - 1)
    let pv_buses: Vec<usize> = (9..=18)
        .chain(21..=24)
        .chain(27..=30)
        .chain(34..=36)
        .map(|b| b - 1)
        .collect();
    debug_assert_eq!(pv_buses.len(), SYNTH_N_PV);
    // sized so that on strong-sun days reactive absorption alone cannot
    // hold the voltage band and some midday curtailment is unavoidable
    let pv_capacity: Vec<f64> = (0..SYNTH_N_PV)
        .map(|_| rng.gen_range(0.09..0.13))
        .collect();
    let pv_rating: Vec<f64> = pv_capacity.iter().map(|c| c * 1.1).collect();
    let load_nominal: Vec<f64> = (0..SYNTH_N_BUS)
        .map(|_| rng.gen_range(0.002..0.005))
        .collect();
    RadialFeeder::new(
        SYNTH_N_BUS,
        edges,
        pv_buses,
        pv_rating,
        pv_capacity,
        load_nominal,
    )
    .expect("synthetic feeder is well-formed")
}
