//! Dense convex quadratic programming by a primal-dual interior-point
//! method with Mehrotra predictor-corrector steps.
//!
//! Solves
//! ```text
//!     minimize    1/2 x' Q x + c' x
//!     subject to  A x  = b
//!                 G x <= h
//! ```
//! for positive semidefinite `Q`. The projection layer sets `Q = I`,
//! which keeps the Newton systems well conditioned at these sizes; the
//! linearized-optimal baseline uses a tiny diagonal `Q` to regularize a
//! linear objective. The Newton step is reduced to the symmetric
//! `(n + n_eq)` system `[Q + G' W G, A'; A, 0]` and factored with LU.

use crate::error::{CoreError, Result};
use nalgebra::{DMatrix, DVector};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 250;

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub nu: DVector<f64>,
    pub lambda: DVector<f64>,
    pub slack: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

pub struct QpProblem<'a> {
    pub q: &'a DMatrix<f64>,
    pub c: &'a DVector<f64>,
    pub a: &'a DMatrix<f64>,
    pub b: &'a DVector<f64>,
    pub g: &'a DMatrix<f64>,
    pub h: &'a DVector<f64>,
}

pub fn solve_qp(p: &QpProblem, tol: f64) -> Result<QpSolution> {
    let n = p.c.len();
    let me = p.b.len();
    let mi = p.h.len();
    assert_eq!(p.q.nrows(), n);
    assert_eq!(p.a.ncols().max(n), n);
    assert_eq!(p.g.ncols().max(n), n);

    if mi == 0 {
        return solve_equality_qp(p, tol);
    }

    // Starting point: x = 0 (shifted onto Ax=b by least squares when
    // equalities exist), strictly positive slacks and multipliers.
    let mut x = DVector::zeros(n);
    if me > 0 {
        let at = p.a.transpose();
        let aat = p.a * &at + DMatrix::identity(me, me) * 1e-12;
        if let Some(chol) = aat.clone().cholesky() {
            x = &at * chol.solve(p.b);
        }
    }
    let gx = p.g * &x;
    let mut s = DVector::from_fn(mi, |i, _| (p.h[i] - gx[i]).max(1.0));
    let mut lambda = DVector::from_element(mi, 1.0);
    let mut nu = DVector::zeros(me);

    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for iter in 0..MAX_ITERATIONS {
        let gx = p.g * &x;
        let r_dual = p.q * &x + p.c + p.a.transpose() * &nu + p.g.transpose() * &lambda;
        let r_pri_eq = p.a * &x - p.b;
        let r_pri_in = &gx + &s - p.h;
        let mu = s.dot(&lambda) / mi as f64;

        let d_res = r_dual.amax();
        let p_res = r_pri_eq.amax().max(
            (0..mi)
                .map(|i| gx[i] - p.h[i])
                .fold(0.0_f64, f64::max),
        );
        let comp = (0..mi)
            .map(|i| (lambda[i] * (gx[i] - p.h[i])).abs())
            .fold(0.0_f64, f64::max);
        last = (p_res, d_res, comp);
        if !d_res.is_finite() || !mu.is_finite() {
            break; // numerical breakdown: report the residuals we had
        }
        if d_res <= tol && p_res <= tol && comp <= tol {
            return Ok(QpSolution {
                x,
                nu,
                lambda,
                slack: s,
                iterations: iter,
                primal_residual: p_res,
                dual_residual: d_res,
                gap: comp,
            });
        }

        // Reduced KKT matrix, shared by predictor and corrector.
        let w = DVector::from_fn(mi, |i, _| lambda[i] / s[i]);
        let mut kkt = DMatrix::zeros(n + me, n + me);
        let mut qw = p.q.clone();
        for r in 0..mi {
            let wr = w[r];
            for i in 0..n {
                let gri = p.g[(r, i)];
                if gri == 0.0 {
                    continue;
                }
                for j in 0..n {
                    qw[(i, j)] += wr * gri * p.g[(r, j)];
                }
            }
        }
        for i in 0..n {
            qw[(i, i)] += 1e-12;
        }
        kkt.view_mut((0, 0), (n, n)).copy_from(&qw);
        if me > 0 {
            kkt.view_mut((0, n), (n, me)).copy_from(&p.a.transpose());
            kkt.view_mut((n, 0), (me, n)).copy_from(p.a);
            for i in 0..me {
                kkt[(n + i, n + i)] = -1e-12;
            }
        }
        let lu = kkt.lu();

        let solve_step = |r_comp: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // dlambda = (lambda .* rg - r_comp) ./ s + W (G dx)
            let coeff = DVector::from_fn(mi, |i, _| (lambda[i] * r_pri_in[i] - r_comp[i]) / s[i]);
            let mut rhs = DVector::zeros(n + me);
            let top = -&r_dual - p.g.transpose() * &coeff;
            rhs.rows_mut(0, n).copy_from(&top);
            if me > 0 {
                rhs.rows_mut(n, me).copy_from(&(-&r_pri_eq));
            }
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dnu = if me > 0 {
                sol.rows(n, me).into_owned()
            } else {
                DVector::zeros(0)
            };
            let gdx = p.g * &dx;
            let dlambda = DVector::from_fn(mi, |i, _| coeff[i] + w[i] * gdx[i]);
            let ds = DVector::from_fn(mi, |i, _| -r_pri_in[i] - gdx[i]);
            Some((dx, dnu, dlambda, ds))
        };

        // Predictor (affine scaling) direction.
        let r_comp_aff = DVector::from_fn(mi, |i, _| s[i] * lambda[i]);
        let (dx_a, _dnu_a, dl_a, ds_a) = match solve_step(&r_comp_aff) {
            Some(step) => step,
            None => break,
        };
        let alpha_p_aff = max_step(&s, &ds_a);
        let alpha_d_aff = max_step(&lambda, &dl_a);
        let mu_aff = (0..mi)
            .map(|i| (s[i] + alpha_p_aff * ds_a[i]) * (lambda[i] + alpha_d_aff * dl_a[i]))
            .sum::<f64>()
            / mi as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let _ = dx_a;

        // Corrector with centering.
        let r_comp = DVector::from_fn(mi, |i, _| {
            s[i] * lambda[i] + ds_a[i] * dl_a[i] - sigma * mu
        });
        let (dx, dnu, dlambda, ds) = match solve_step(&r_comp) {
            Some(step) => step,
            None => break,
        };

        let alpha_p = (0.99 * max_step(&s, &ds)).min(1.0);
        let alpha_d = (0.99 * max_step(&lambda, &dlambda)).min(1.0);
        x += alpha_p * &dx;
        s += alpha_p * &ds;
        lambda += alpha_d * &dlambda;
        if me > 0 {
            nu += alpha_d * &dnu;
        }
    }

    Err(CoreError::NonConvergence {
        iterations: MAX_ITERATIONS,
        primal: last.0,
        dual: last.1,
        gap: last.2,
    })
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = 1.0_f64;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

fn solve_equality_qp(p: &QpProblem, tol: f64) -> Result<QpSolution> {
    let n = p.c.len();
    let me = p.b.len();
    let mut kkt = DMatrix::zeros(n + me, n + me);
    kkt.view_mut((0, 0), (n, n)).copy_from(p.q);
    if me > 0 {
        kkt.view_mut((0, n), (n, me)).copy_from(&p.a.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(p.a);
    }
    let mut rhs = DVector::zeros(n + me);
    rhs.rows_mut(0, n).copy_from(&(-p.c));
    if me > 0 {
        rhs.rows_mut(n, me).copy_from(p.b);
    }
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or(CoreError::NonConvergence {
            iterations: 1,
            primal: f64::INFINITY,
            dual: f64::INFINITY,
            gap: f64::INFINITY,
        })?;
    let x = sol.rows(0, n).into_owned();
    let nu = if me > 0 {
        sol.rows(n, me).into_owned()
    } else {
        DVector::zeros(0)
    };
    let p_res = (p.a * &x - p.b).amax();
    let d_res = (p.q * &x + p.c + p.a.transpose() * &nu).amax();
    if p_res > tol.max(1e-9) || d_res > tol.max(1e-9) {
        return Err(CoreError::NonConvergence {
            iterations: 1,
            primal: p_res,
            dual: d_res,
            gap: 0.0,
        });
    }
    Ok(QpSolution {
        x,
        nu,
        lambda: DVector::zeros(0),
        slack: DVector::zeros(0),
        iterations: 1,
        primal_residual: p_res,
        dual_residual: d_res,
        gap: 0.0,
    })
}
