//! Euclidean projection onto `{u : Au = b, Gu <= h}` and its exact
//! backward pass.
//!
//! The forward pass solves the projection QP with [`crate::qp`]. The
//! backward pass differentiates the KKT conditions implicitly: with the
//! constraint data held fixed, the Jacobian of the projected point with
//! respect to the input is the orthogonal projector onto the nullspace
//! of the active constraint rows, so a vector-Jacobian product is one
//! small regularized solve.

use crate::autodiff::{custom_node, Node};
use crate::error::{CoreError, Result};
use crate::qp::{solve_qp, QpProblem};
use crate::tensor::Tensor;
use nalgebra::{DMatrix, DVector};

/// Multiplier / slack threshold below which a constraint is treated as
/// inactive in the backward pass.
const ACTIVE_TOL: f64 = 1e-7;
/// Diagonal regularization on the backward normal equations.
const BACKWARD_REG: f64 = 1e-10;
/// Phase-1 slack above which the set is declared empty.
const FEAS_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LinearConstraintSet {
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    /// Interior-ish point found by the phase-1 solve.
    feasible_point: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ProjectionSolution {
    pub u_star: DVector<f64>,
    pub lambda_star: DVector<f64>,
    pub nu_star: DVector<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

impl LinearConstraintSet {
    /// Builds the set, dropping linearly dependent equality rows and
    /// running a phase-1 feasibility solve. An empty set is an error
    /// carrying the phase-1 slack as certificate.
    pub fn new(
        a: DMatrix<f64>,
        b: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self> {
        let n = if g.ncols() > 0 { g.ncols() } else { a.ncols() };
        if a.nrows() != b.len() || g.nrows() != h.len() {
            return Err(CoreError::Contract(
                "constraint row counts do not match right-hand sides".into(),
            ));
        }
        if a.nrows() > 0 && a.ncols() != n {
            return Err(CoreError::Contract(
                "equality and inequality column counts differ".into(),
            ));
        }
        let (a, b) = drop_dependent_rows(a, b);
        let feasible_point = phase_one(&a, &b, &g, &h)?;
        Ok(LinearConstraintSet {
            a,
            b,
            g,
            h,
            feasible_point,
        })
    }

    /// Inequality-only set.
    pub fn from_inequalities(g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        let n = g.ncols();
        LinearConstraintSet::new(DMatrix::zeros(0, n), DVector::zeros(0), g, h)
    }

    pub fn dim(&self) -> usize {
        if self.g.ncols() > 0 {
            self.g.ncols()
        } else {
            self.a.ncols()
        }
    }

    pub fn n_eq(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.g.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn feasible_point(&self) -> &DVector<f64> {
        &self.feasible_point
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        let eq_ok = self.n_eq() == 0 || (&self.a * u - &self.b).amax() <= tol;
        let in_ok = self.n_ineq() == 0
            || (0..self.n_ineq())
                .map(|i| self.g.row(i).transpose().dot(u) - self.h[i])
                .fold(f64::NEG_INFINITY, f64::max)
                <= tol;
        eq_ok && in_ok
    }
}

/// Drops equality rows that are linear combinations of earlier ones
/// (Gram-Schmidt with a relative threshold).
fn drop_dependent_rows(a: DMatrix<f64>, b: DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let me = a.nrows();
    if me == 0 {
        return (a, b);
    }
    let n = a.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep: Vec<usize> = Vec::new();
    for i in 0..me {
        let mut v = a.row(i).transpose().into_owned();
        let orig = v.norm();
        for q in &basis {
            let proj = q.dot(&v);
            v -= proj * q;
        }
        if v.norm() > 1e-10 * orig.max(1.0) {
            basis.push(v.normalize());
            keep.push(i);
        }
    }
    if keep.len() == me {
        return (a, b);
    }
    let mut a2 = DMatrix::zeros(keep.len(), n);
    let mut b2 = DVector::zeros(keep.len());
    for (r, &i) in keep.iter().enumerate() {
        a2.row_mut(r).copy_from(&a.row(i));
        b2[r] = b[i];
    }
    (a2, b2)
}

/// Phase-1: minimize the worst inequality violation t subject to
/// Au = b, Gu - t <= h. Solved as a QP with a tiny quadratic
/// regularizer and a lower bound on t so the objective is coercive.
fn phase_one(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = if g.ncols() > 0 { g.ncols() } else { a.ncols() };
    let mi = g.nrows();
    if mi == 0 {
        // Equality-only set: least-squares point, consistent iff residual small.
        if a.nrows() == 0 {
            return Ok(DVector::zeros(n));
        }
        let svd = a.clone().svd(true, true);
        let u = svd.solve(b, 1e-12).map_err(|e| CoreError::Contract(e.to_string()))?;
        let res = (a * &u - b).amax();
        if res > FEAS_TOL {
            return Err(CoreError::Infeasible {
                slack: res,
                tol: FEAS_TOL,
            });
        }
        return Ok(u);
    }
    // Variables z = (u, t).
    let nz = n + 1;
    let mut q = DMatrix::identity(nz, nz) * 1e-8;
    q[(n, n)] = 1e-8;
    let mut c = DVector::zeros(nz);
    c[n] = 1.0;
    let mut a1 = DMatrix::zeros(a.nrows(), nz);
    if a.nrows() > 0 {
        a1.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    }
    let mut g1 = DMatrix::zeros(mi + 1, nz);
    g1.view_mut((0, 0), (mi, n)).copy_from(g);
    for i in 0..mi {
        g1[(i, n)] = -1.0;
    }
    g1[(mi, n)] = -1.0; // t >= -1 keeps the regularized LP bounded
    let mut h1 = DVector::zeros(mi + 1);
    h1.rows_mut(0, mi).copy_from(h);
    h1[mi] = 1.0;
    let sol = solve_qp(
        &QpProblem {
            q: &q,
            c: &c,
            a: &a1,
            b,
            g: &g1,
            h: &h1,
        },
        // the phase-1 LP only has to decide feasibility against
        // FEAS_TOL; solving it tighter risks interior-point stalls on
        // degenerate vertices
        1e-8,
    )?;
    let t = sol.x[nz - 1];
    if t > FEAS_TOL {
        return Err(CoreError::Infeasible {
            slack: t,
            tol: FEAS_TOL,
        });
    }
    Ok(sol.x.rows(0, n).into_owned())
}

/// Projects `u_hat` onto the set: the unique minimizer of
/// `1/2 ||u - u_hat||^2` with all three KKT residuals below `tol`.
pub fn project(
    u_hat: &DVector<f64>,
    set: &LinearConstraintSet,
    tol: f64,
) -> Result<ProjectionSolution> {
    assert!(tol > 0.0);
    let n = set.dim();
    assert_eq!(u_hat.len(), n, "projection input dimension mismatch");
    let q = DMatrix::identity(n, n);
    let c = -u_hat;
    let sol = solve_qp(
        &QpProblem {
            q: &q,
            c: &c,
            a: &set.a,
            b: &set.b,
            g: &set.g,
            h: &set.h,
        },
        tol,
    )?;
    Ok(ProjectionSolution {
        u_star: sol.x,
        lambda_star: sol.lambda,
        nu_star: sol.nu,
        iterations: sol.iterations,
        primal_residual: sol.primal_residual,
        dual_residual: sol.dual_residual,
        gap: sol.gap,
    })
}

/// Active inequality rows for the backward pass: multiplier clearly
/// positive or slack clearly zero.
fn active_rows(sol: &ProjectionSolution, set: &LinearConstraintSet) -> Vec<usize> {
    (0..set.n_ineq())
        .filter(|&i| {
            // interior-point iterates leave small residual multipliers
            // on inactive rows, so activity compares lambda against
            // the slack rather than a fixed threshold alone
            let slack = set.h[i] - set.g.row(i).transpose().dot(&sol.u_star);
            slack < ACTIVE_TOL || sol.lambda_star[i] > slack.max(ACTIVE_TOL)
        })
        .collect()
}

/// Vector-Jacobian product `(du*/du_hat)' * grad_out`, obtained from
/// the KKT differentials with the constraint data fixed. Where the
/// active set is strict the Jacobian is `I - N'(NN')^{-1}N` for the
/// stacked active rows `N`, which is symmetric, so the VJP is the same
/// projector applied to `grad_out`.
pub fn project_backward(
    sol: &ProjectionSolution,
    set: &LinearConstraintSet,
    grad_out: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = set.dim();
    assert_eq!(grad_out.len(), n);
    let act = active_rows(sol, set);
    let m = act.len() + set.n_eq();
    if m == 0 {
        return Ok(grad_out.clone());
    }
    let mut normals = DMatrix::zeros(m, n);
    for (r, &i) in act.iter().enumerate() {
        normals.row_mut(r).copy_from(&set.g.row(i));
    }
    for r in 0..set.n_eq() {
        normals.row_mut(act.len() + r).copy_from(&set.a.row(r));
    }
    let gram = &normals * normals.transpose() + DMatrix::identity(m, m) * BACKWARD_REG;
    let rhs = &normals * grad_out;
    let y = gram
        .lu()
        .solve(&rhs)
        .ok_or(CoreError::DegenerateGradient)?;
    Ok(grad_out - normals.transpose() * y)
}

fn dvec_from_tensor_row(t: &Tensor, row: usize, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |j, _| t.data()[row * n + j])
}

/// Wraps the projection as a custom autodiff node. A rank-1 input is a
/// single point; a rank-2 `[batch, n]` input is projected row by row
/// (independent solves, deterministic order).
pub fn projection_layer(
    u_hat: &Node,
    set: &LinearConstraintSet,
    tol: f64,
) -> Result<Node> {
    let n = set.dim();
    let (batch, rank1) = match u_hat.value().shape() {
        [len] => {
            if *len != n {
                return Err(CoreError::Contract(format!(
                    "projection layer expects dim {n}, got {len}"
                )));
            }
            (1, true)
        }
        [b, len] => {
            if *len != n {
                return Err(CoreError::Contract(format!(
                    "projection layer expects dim {n}, got {len}"
                )));
            }
            (*b, false)
        }
        other => {
            return Err(CoreError::Contract(format!(
                "projection layer expects rank 1 or 2, got shape {other:?}"
            )))
        }
    };

    let mut out = Vec::with_capacity(batch * n);
    let mut sols = Vec::with_capacity(batch);
    for r in 0..batch {
        let u = dvec_from_tensor_row(u_hat.value(), r, n);
        let sol = project(&u, set, tol)?;
        out.extend(sol.u_star.iter().copied());
        sols.push(sol);
    }
    let value = if rank1 {
        Tensor::vector(out)
    } else {
        Tensor::matrix(batch, n, out)?
    };
    let set_b = set.clone();
    Ok(custom_node(
        value,
        vec![u_hat.clone()],
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(batch * n);
            for (r, sol) in sols.iter().enumerate() {
                let go = dvec_from_tensor_row(g, r, n);
                let gi = project_backward(sol, &set_b, &go)
                    .unwrap_or_else(|_| DVector::zeros(n));
                grads.extend(gi.iter().copied());
            }
            let t = if rank1 {
                Tensor::vector(grads)
            } else {
                Tensor::matrix(batch, n, grads).expect("projection vjp shape")
            };
            vec![t]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff;

    fn box_set(n: usize, lim: f64) -> LinearConstraintSet {
        let mut g = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            g[(n + i, i)] = -1.0;
        }
        let h = DVector::from_element(2 * n, lim);
        LinearConstraintSet::from_inequalities(g, h).unwrap()
    }

    #[test]
    fn box_clamp_projection() {
        let set = box_set(2, 1.0);
        let sol = project(&DVector::from_vec(vec![2.0, 0.0]), &set, 1e-8).unwrap();
        assert!((sol.u_star[0] - 1.0).abs() < 1e-7);
        assert!(sol.u_star[1].abs() < 1e-7);
    }

    #[test]
    fn interior_point_is_identity_with_zero_multipliers() {
        let set = box_set(3, 1.0);
        let u = DVector::from_vec(vec![0.2, -0.5, 0.0]);
        let sol = project(&u, &set, 1e-8).unwrap();
        assert!((&sol.u_star - &u).amax() < 1e-7);
        assert!(sol.lambda_star.amax() < 1e-6);
    }

    #[test]
    fn halfspace_projection_analytic() {
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let h = DVector::from_element(1, 1.0);
        let set = LinearConstraintSet::from_inequalities(g, h).unwrap();
        let sol = project(&DVector::from_vec(vec![1.0, 1.0]), &set, 1e-8).unwrap();
        assert!((sol.u_star[0] - 0.5).abs() < 1e-7);
        assert!((sol.u_star[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn infeasible_set_detected_with_certificate() {
        // x <= -1 and x >= 1
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![-1.0, -1.0]);
        match LinearConstraintSet::from_inequalities(g, h) {
            Err(CoreError::Infeasible { slack, .. }) => assert!(slack > 0.5),
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn redundant_equality_rows_dropped() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let g = DMatrix::zeros(0, 2);
        let h = DVector::zeros(0);
        let set = LinearConstraintSet::new(a, b, g, h).unwrap();
        assert_eq!(set.n_eq(), 1);
    }

    #[test]
    fn backward_interior_is_identity() {
        let set = box_set(2, 1.0);
        let sol = project(&DVector::from_vec(vec![0.1, 0.2]), &set, 1e-8).unwrap();
        let g = DVector::from_vec(vec![0.7, -0.3]);
        let out = project_backward(&sol, &set, &g).unwrap();
        assert!((&out - &g).amax() < 1e-8);
    }

    #[test]
    fn backward_fully_clamped_is_zero() {
        // 1-D u >= 0, u_hat = -3 -> u* = 0, Jacobian 0
        let g = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let h = DVector::zeros(1);
        let set = LinearConstraintSet::from_inequalities(g, h).unwrap();
        let sol = project(&DVector::from_vec(vec![-3.0]), &set, 1e-8).unwrap();
        let out = project_backward(&sol, &set, &DVector::from_vec(vec![1.0])).unwrap();
        assert!(out[0].abs() < 1e-8);
    }

    #[test]
    fn backward_halfspace_tangent_projector() {
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let h = DVector::from_element(1, 1.0);
        let set = LinearConstraintSet::from_inequalities(g, h).unwrap();
        let sol = project(&DVector::from_vec(vec![1.0, 1.0]), &set, 1e-8).unwrap();
        // J = [[0.5, -0.5], [-0.5, 0.5]]
        let e0 = project_backward(&sol, &set, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((e0[0] - 0.5).abs() < 1e-6 && (e0[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let h = DVector::from_element(1, 1.0);
        let set = LinearConstraintSet::from_inequalities(g, h).unwrap();
        let uh = vec![1.3, 0.4];
        let f = |u: &[f64]| {
            let sol = project(&DVector::from_vec(u.to_vec()), &set, 1e-10).unwrap();
            // loss = sum(square(P(u)))
            sol.u_star.iter().map(|v| v * v).sum::<f64>()
        };
        let x = Node::leaf(Tensor::vector(uh.clone()));
        let p = projection_layer(&x, &set, 1e-10).unwrap();
        let loss = autodiff::sum(&autodiff::square(&p));
        autodiff::backward(&loss).unwrap();
        let grad = x.grad().unwrap();
        for i in 0..2 {
            let hstep = 1e-5;
            let mut up = uh.clone();
            let mut um = uh.clone();
            up[i] += hstep;
            um[i] -= hstep;
            let fd = (f(&up) - f(&um)) / (2.0 * hstep);
            assert!(
                (grad.at(i) - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                "component {i}: {} vs {}",
                grad.at(i),
                fd
            );
        }
    }

    #[test]
    fn batched_layer_projects_rows_independently() {
        let set = box_set(2, 1.0);
        let x = Node::leaf(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.1, 0.1]).unwrap());
        let p = projection_layer(&x, &set, 1e-8).unwrap();
        assert!((p.value().at2(0, 0) - 1.0).abs() < 1e-7);
        assert!((p.value().at2(1, 0) - 0.1).abs() < 1e-7);
    }
}
