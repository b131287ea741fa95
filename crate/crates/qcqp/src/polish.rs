//! Active-set Newton refinement of an interior-point solution.
//!
//! The interior-point iterate satisfies the conic KKT conditions to the
//! requested tolerance, but `x` and the quadratic multipliers converge only
//! like the square root of the duality gap along curved boundaries. Guessing
//! the active set from the final iterate and solving the resulting equality
//! KKT system with Newton's method recovers full accuracy. The refined point
//! is kept only if it is at least as good as the original.

use nalgebra::{DMatrix, DVector};

use crate::{ConvexQcqp, Duals};

/// Per-row scale factors used to compare slacks with multipliers.
pub(crate) struct RowScales<'a> {
    /// `(original index, scale)` for every equality row kept by the solver.
    pub eq: &'a [(usize, f64)],
    pub ineq: &'a [f64],
    pub quad: &'a [f64],
}

pub(crate) struct Polished {
    pub x: DVector<f64>,
    pub duals: Duals,
}

/// Stationarity of the Lagrangian in original units, relative to `1 + ‖q₀‖∞`.
pub(crate) fn stationarity(problem: &ConvexQcqp, x: &DVector<f64>, d: &Duals) -> f64 {
    let mut g = problem.objective.gradient(x);
    g += problem.eq.a.tr_mul(&d.eq);
    g += problem.ineq.a.tr_mul(&d.ineq);
    for (f, l) in problem.quad.iter().zip(d.quad.iter()) {
        g += f.gradient(x) * *l;
    }
    g.amax() / (1.0 + problem.objective.q.amax())
}

/// Largest constraint violation in row-normalized units.
fn scaled_violation(problem: &ConvexQcqp, x: &DVector<f64>, sc: &RowScales) -> f64 {
    let mut v = 0.0_f64;
    for &(i, s) in sc.eq {
        v = v.max(((problem.eq.a.row(i) * x)[0] - problem.eq.b[i]).abs() / s);
    }
    for (i, s) in sc.ineq.iter().enumerate() {
        v = v.max(((problem.ineq.a.row(i) * x)[0] - problem.ineq.b[i]) / s);
    }
    for (f, s) in problem.quad.iter().zip(sc.quad) {
        v = v.max(f.eval(x) / s);
    }
    v
}

pub(crate) fn polish(
    problem: &ConvexQcqp,
    x0: &DVector<f64>,
    duals0: &Duals,
    sc: &RowScales,
    tol: f64,
) -> Option<Polished> {
    let n = problem.n;
    let lin_active: Vec<usize> = (0..problem.ineq.len())
        .filter(|&i| {
            let slack = (problem.ineq.b[i] - (problem.ineq.a.row(i) * x0)[0]) / sc.ineq[i];
            duals0.ineq[i] * sc.ineq[i] > slack
        })
        .collect();
    let quad_active: Vec<usize> = (0..problem.quad.len())
        .filter(|&j| {
            let slack = -problem.quad[j].eval(x0) / sc.quad[j];
            duals0.quad[j] * sc.quad[j] > slack
        })
        .collect();
    let ne = sc.eq.len();
    let nl = lin_active.len();
    let nq = quad_active.len();
    let dim = n + ne + nl + nq;

    // unknowns: x, then multipliers in row-normalized units
    let mut u = DVector::zeros(dim);
    u.rows_mut(0, n).copy_from(x0);
    for (k, &(i, s)) in sc.eq.iter().enumerate() {
        u[n + k] = duals0.eq[i] * s;
    }
    for (k, &i) in lin_active.iter().enumerate() {
        u[n + ne + k] = duals0.ineq[i] * sc.ineq[i];
    }
    for (k, &j) in quad_active.iter().enumerate() {
        u[n + ne + nl + k] = duals0.quad[j] * sc.quad[j];
    }

    let residual = |u: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let x = u.rows(0, n).into_owned();
        let mut f = DVector::zeros(dim);
        let mut jac = DMatrix::zeros(dim, dim);
        let mut hess = problem.objective.p.clone();
        let mut grad = problem.objective.gradient(&x);
        for (k, &(i, s)) in sc.eq.iter().enumerate() {
            let row = problem.eq.a.row(i).transpose() / s;
            grad += &row * u[n + k];
            f[n + k] = row.dot(&x) - problem.eq.b[i] / s;
            for c in 0..n {
                jac[(n + k, c)] = row[c];
                jac[(c, n + k)] = row[c];
            }
        }
        for (k, &i) in lin_active.iter().enumerate() {
            let s = sc.ineq[i];
            let row = problem.ineq.a.row(i).transpose() / s;
            let r = n + ne + k;
            grad += &row * u[r];
            f[r] = row.dot(&x) - problem.ineq.b[i] / s;
            for c in 0..n {
                jac[(r, c)] = row[c];
                jac[(c, r)] = row[c];
            }
        }
        for (k, &j) in quad_active.iter().enumerate() {
            let s = sc.quad[j];
            let q = &problem.quad[j];
            let r = n + ne + nl + k;
            let gq = q.gradient(&x) / s;
            grad += &gq * u[r];
            hess += &q.p * (u[r] / s);
            f[r] = q.eval(&x) / s;
            for c in 0..n {
                jac[(r, c)] = gq[c];
                jac[(c, r)] = gq[c];
            }
        }
        f.rows_mut(0, n).copy_from(&grad);
        jac.view_mut((0, 0), (n, n)).copy_from(&hess);
        (f, jac)
    };

    for _ in 0..8 {
        let (f, jac) = residual(&u);
        if f.amax() < 1e-14 * (1.0 + problem.objective.q.amax()) {
            break;
        }
        let step = jac.lu().solve(&(-f))?;
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        u += step;
    }

    let x = u.rows(0, n).into_owned();
    let mut duals = Duals {
        eq: DVector::zeros(problem.eq.len()),
        ineq: DVector::zeros(problem.ineq.len()),
        quad: DVector::zeros(problem.quad.len()),
    };
    for (k, &(i, s)) in sc.eq.iter().enumerate() {
        duals.eq[i] = u[n + k] / s;
    }
    for (k, &i) in lin_active.iter().enumerate() {
        let l = u[n + ne + k];
        if l < -tol {
            return None;
        }
        duals.ineq[i] = l.max(0.0) / sc.ineq[i];
    }
    for (k, &j) in quad_active.iter().enumerate() {
        let l = u[n + ne + nl + k];
        if l < -tol {
            return None;
        }
        duals.quad[j] = l.max(0.0) / sc.quad[j];
    }

    let before = stationarity(problem, x0, duals0).max(scaled_violation(problem, x0, sc).max(0.0));
    let after = stationarity(problem, &x, &duals).max(scaled_violation(problem, &x, sc).max(0.0));
    if after <= before && after.is_finite() {
        Some(Polished { x, duals })
    } else {
        None
    }
}
