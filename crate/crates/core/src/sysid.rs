//! Surrogate-model fitting: a linear thermal model by ordinary least
//! squares, and a voltage sensitivity model by central finite
//! differences of the nonlinear power-flow solution around the flat
//! voltage point.

use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Discrete-time linear surrogate `x+ = A x + B_u u + B_d w`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b_u: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    /// Model time step in minutes.
    pub dt_minutes: f64,
}

impl LinearDynamics {
    pub fn n_state(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_input(&self) -> usize {
        self.b_u.ncols()
    }

    pub fn n_disturbance(&self) -> usize {
        self.b_d.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b_u * u + &self.b_d * w
    }

    /// Spectral radius of A; the fit reports a warning when >= 1.
    pub fn spectral_radius(&self) -> f64 {
        self.a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// Linearized grid model `v ~= v_bar + H [p - p_bar; q - q_bar]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityModel {
    pub v_bar: DVector<f64>,
    pub p_bar: DVector<f64>,
    pub q_bar: DVector<f64>,
    /// N x 2N stacked [R, B] sensitivities.
    pub h: DMatrix<f64>,
    /// Voltage safety margin in p.u. (set by `voltage_margin`).
    pub eps_v: f64,
}

impl SensitivityModel {
    pub fn n_bus(&self) -> usize {
        self.v_bar.len()
    }

    pub fn predict(&self, p: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        let n = self.n_bus();
        let mut du = DVector::zeros(2 * n);
        du.rows_mut(0, n).copy_from(&(p - &self.p_bar));
        du.rows_mut(n, n).copy_from(&(q - &self.q_bar));
        &self.v_bar + &self.h * du
    }
}

#[derive(Debug, Clone)]
pub struct ThermalSample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub x_next: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ThermalFit {
    pub model: LinearDynamics,
    pub train_rmse: f64,
    pub spectral_radius_warning: bool,
}

/// One-step least-squares fit of (A, B_u, B_d). Errors when the
/// regressor matrix is rank deficient, naming the unexcited direction.
pub fn fit_thermal(data: &[ThermalSample], dt_minutes: f64) -> Result<ThermalFit> {
    if data.is_empty() {
        return Err(CoreError::Contract("fit_thermal: empty data".into()));
    }
    let ns = data[0].x.len();
    let nu = data[0].u.len();
    let nw = data[0].w.len();
    let p = ns + nu + nw;
    if data.len() < 10 * p {
        return Err(CoreError::Contract(format!(
            "fit_thermal: need >= {} samples for {} parameters per row, got {}",
            10 * p,
            p,
            data.len()
        )));
    }
    let m = data.len();
    let mut phi = DMatrix::zeros(m, p);
    let mut y = DMatrix::zeros(m, ns);
    for (r, s) in data.iter().enumerate() {
        for j in 0..ns {
            phi[(r, j)] = s.x[j];
        }
        for j in 0..nu {
            phi[(r, ns + j)] = s.u[j];
        }
        for j in 0..nw {
            phi[(r, ns + nu + j)] = s.w[j];
        }
        for j in 0..ns {
            y[(r, j)] = s.x_next[j];
        }
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 1e-10 * smax.max(1.0) {
        // Name the deficient direction from the right singular vector.
        let v_t = svd.v_t.as_ref().expect("svd v_t");
        let idx = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let names: Vec<String> = (0..ns)
            .map(|i| format!("x[{i}]"))
            .chain((0..nu).map(|i| format!("u[{i}]")))
            .chain((0..nw).map(|i| format!("w[{i}]")))
            .collect();
        let dir: Vec<String> = (0..p)
            .filter(|&j| v_t[(idx, j)].abs() > 0.3)
            .map(|j| names[j].clone())
            .collect();
        return Err(CoreError::Identifiability {
            direction: if dir.is_empty() {
                "mixed regressor direction".into()
            } else {
                dir.join(", ")
            },
        });
    }
    // Solve per output column.
    let mut theta = DMatrix::zeros(p, ns);
    for j in 0..ns {
        let col = svd
            .solve(&y.column(j).into_owned(), 1e-12)
            .map_err(|e| CoreError::Contract(e.to_string()))?;
        theta.column_mut(j).copy_from(&col);
    }
    let theta_t = theta.transpose(); // ns x p
    let a = theta_t.columns(0, ns).into_owned();
    let b_u = theta_t.columns(ns, nu).into_owned();
    let b_d = theta_t.columns(ns + nu, nw).into_owned();
    let model = LinearDynamics {
        a,
        b_u,
        b_d,
        dt_minutes,
    };
    let rmse = eval_rmse(&model, data);
    let rho = model.spectral_radius();
    Ok(ThermalFit {
        model,
        train_rmse: rmse,
        spectral_radius_warning: rho >= 1.0,
    })
}

/// Root-mean-square one-step prediction error over a data set.
pub fn eval_rmse(model: &LinearDynamics, data: &[ThermalSample]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in data {
        let pred = model.step(&s.x, &s.u, &s.w);
        for j in 0..pred.len() {
            let e = pred[j] - s.x_next[j];
            acc += e * e;
            count += 1;
        }
    }
    (acc / count as f64).sqrt()
}

/// Finite-difference perturbation size for the grid linearization, in
/// p.u. Balances truncation error against solver tolerance noise.
pub const GRID_FD_DELTA: f64 = 1e-4;

/// Power-flow oracle: injections (p, q) per non-slack bus to bus
/// voltage magnitudes.
pub type PfOracle<'a> = dyn Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>> + 'a;

/// Builds the sensitivity model around the flat-voltage reference by
/// central differences of the AC solution with respect to each bus's
/// active and reactive injection.
pub fn linearize_grid(
    pf: &PfOracle,
    n_bus: usize,
    p_ref: &DVector<f64>,
    q_ref: &DVector<f64>,
) -> Result<SensitivityModel> {
    let v_ref = pf(p_ref, q_ref)?;
    let mut h = DMatrix::zeros(n_bus, 2 * n_bus);
    for bus in 0..n_bus {
        for (block, base) in [(0usize, p_ref), (1usize, q_ref)] {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[bus] += GRID_FD_DELTA;
            minus[bus] -= GRID_FD_DELTA;
            let (vp, vm) = if block == 0 {
                (pf(&plus, q_ref), pf(&minus, q_ref))
            } else {
                (pf(p_ref, &plus), pf(p_ref, &minus))
            };
            let (vp, vm) = match (vp, vm) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    return Err(CoreError::Linearization {
                        bus,
                        source: Box::new(e),
                    })
                }
            };
            let col = (vp - vm) / (2.0 * GRID_FD_DELTA);
            h.column_mut(block * n_bus + bus).copy_from(&col);
        }
    }
    Ok(SensitivityModel {
        v_bar: v_ref,
        p_bar: p_ref.clone(),
        q_bar: q_ref.clone(),
        h,
        eps_v: 0.0,
    })
}
