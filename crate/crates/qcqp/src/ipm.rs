//! Primal-dual interior-point method with Mehrotra predictor-corrector.
//!
//! Quadratic constraints are rewritten as second-order cones using a square
//! root of their Hessian, so the solver works on
//!
//! ```text
//!     minimize     ½ xᵀ P x + cᵀ x
//!     subject to   A x = b,   G x + s = h,   s ∈ K
//! ```
//!
//! with `K` a product of the nonnegative orthant and Lorentz cones. Steps use
//! Nesterov-Todd scaling and a dense LU factorization of the reduced KKT
//! system.

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::cone::{Cones, NtScaling};
use crate::convexity::{check_convexity, psd_factor};
use crate::polish::{polish, RowScales};
use crate::{ConvexQcqp, QcqpError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Refine an optimal iterate with an active-set Newton step.
    pub polish: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 100,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
    Numerical,
}

impl SolveStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::Numerical => "numerical",
        }
    }
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Relative KKT residuals of the conic form the solver iterates on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖P x + c + Aᵀy + Gᵀz‖∞ / (1 + ‖c‖∞)`
    pub stationarity: f64,
    /// `max(‖Ax − b‖∞, ‖Gx + s − h‖∞) / (1 + max(‖b‖∞, ‖h‖∞))`
    pub primal: f64,
    /// Distance of the multipliers outside the dual cone.
    pub dual: f64,
    /// `sᵀz / (1 + |objective|)`
    pub gap: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.gap)
    }
}

/// Multipliers in the units of the original constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub quad: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSolution {
    pub x: DVector<f64>,
    pub duals: Duals,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub objective: f64,
    /// Lagrangian value at the final iterate; a lower bound on the optimum
    /// once stationarity holds.
    pub dual_objective: f64,
    /// Whether the active-set refinement replaced the interior-point iterate.
    pub polished: bool,
}

impl SolverSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
enum QuadRow {
    Linear(usize),
    Cone(usize),
}

/// The problem in conic form with every row rescaled to unit size.
struct ConicForm {
    p: DMatrix<f64>,
    c: DVector<f64>,
    r0: f64,
    a: DMatrix<f64>,
    b: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    cones: Cones,
    eq_keep: Vec<(usize, f64)>,
    ineq_scale: Vec<f64>,
    quad_rows: Vec<(QuadRow, f64)>,
}

fn row_scale(row: &[f64]) -> f64 {
    let m = row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

impl ConicForm {
    fn build(problem: &ConvexQcqp) -> Result<Self, Infeasible> {
        let n = problem.n;
        let mut lin_rows: Vec<(Vec<f64>, f64)> = Vec::new();
        let mut ineq_scale = Vec::with_capacity(problem.ineq.len());
        for i in 0..problem.ineq.len() {
            let row: Vec<f64> = problem.ineq.a.row(i).iter().copied().collect();
            let s = row_scale(&row);
            let rhs = problem.ineq.b[i];
            if row.iter().all(|v| *v == 0.0) && rhs < 0.0 {
                return Err(Infeasible(problem.ineq_label(i)));
            }
            lin_rows.push((row.iter().map(|v| v / s).collect(), rhs / s));
            ineq_scale.push(s);
        }

        let mut quad_rows = Vec::with_capacity(problem.quad.len());
        let mut soc_blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
        for (i, f) in problem.quad.iter().enumerate() {
            let sigma = f.p.amax().max(f.q.amax()).max(f.r.abs()).max(1e-12);
            let pq = &f.p / sigma;
            let qq = &f.q / sigma;
            let rr = f.r / sigma;
            let l = psd_factor(&pq);
            if l.ncols() == 0 {
                let row: Vec<f64> = qq.iter().copied().collect();
                let s = row_scale(&row);
                if row.iter().all(|v| *v == 0.0) && rr > 0.0 {
                    return Err(Infeasible(problem.quad_label(i)));
                }
                quad_rows.push((QuadRow::Linear(lin_rows.len()), sigma * s));
                lin_rows.push((row.iter().map(|v| v / s).collect(), -rr / s));
            } else {
                // ‖(½ + r + qᵀx, Lᵀx)‖ <= ½ − r − qᵀx
                let k = l.ncols();
                let mut gb = DMatrix::zeros(k + 2, n);
                let mut hb = DVector::zeros(k + 2);
                gb.row_mut(0).copy_from(&qq.transpose());
                gb.row_mut(1).copy_from(&qq.transpose());
                hb[0] = 0.5 - rr;
                hb[1] = -0.5 - rr;
                for j in 0..k {
                    gb.row_mut(j + 2).copy_from(&(-l.column(j).transpose()));
                }
                quad_rows.push((QuadRow::Cone(soc_blocks.len()), sigma));
                soc_blocks.push((gb, hb));
            }
        }

        let nonneg = lin_rows.len();
        let soc: Vec<usize> = soc_blocks.iter().map(|(g, _)| g.nrows()).collect();
        let cones = Cones { nonneg, soc };
        let m = cones.dim();
        let mut g = DMatrix::zeros(m, n);
        let mut h = DVector::zeros(m);
        for (i, (row, rhs)) in lin_rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                g[(i, j)] = *v;
            }
            h[i] = *rhs;
        }
        let mut start = nonneg;
        let mut cone_start = Vec::with_capacity(soc_blocks.len());
        for (gb, hb) in &soc_blocks {
            g.rows_mut(start, gb.nrows()).copy_from(gb);
            h.rows_mut(start, hb.len()).copy_from(hb);
            cone_start.push(start);
            start += gb.nrows();
        }
        let quad_rows = quad_rows
            .into_iter()
            .map(|(r, s)| match r {
                QuadRow::Cone(b) => (QuadRow::Cone(cone_start[b]), s),
                other => (other, s),
            })
            .collect();

        let mut eq_rows = Vec::new();
        let mut eq_keep = Vec::new();
        for i in 0..problem.eq.len() {
            let row: Vec<f64> = problem.eq.a.row(i).iter().copied().collect();
            let rhs = problem.eq.b[i];
            if row.iter().all(|v| *v == 0.0) {
                if rhs.abs() > 0.0 {
                    return Err(Infeasible(format!("eq[{i}]")));
                }
                continue;
            }
            let s = row_scale(&row);
            eq_keep.push((i, s));
            eq_rows.push((row.iter().map(|v| v / s).collect::<Vec<_>>(), rhs / s));
        }
        let mut a = DMatrix::zeros(eq_rows.len(), n);
        let mut b = DVector::zeros(eq_rows.len());
        for (i, (row, rhs)) in eq_rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                a[(i, j)] = *v;
            }
            b[i] = *rhs;
        }

        let p = (&problem.objective.p + problem.objective.p.transpose()) * 0.5;
        Ok(Self {
            p,
            c: problem.objective.q.clone(),
            r0: problem.objective.r,
            a,
            b,
            g,
            h,
            cones,
            eq_keep,
            ineq_scale,
            quad_rows,
        })
    }

    fn row_scales(&self) -> OwnedScales {
        OwnedScales {
            eq: self.eq_keep.clone(),
            ineq: self.ineq_scale.clone(),
            quad: self.quad_rows.iter().map(|(_, s)| *s).collect(),
        }
    }

    fn duals(&self, problem: &ConvexQcqp, y: &DVector<f64>, z: &DVector<f64>) -> Duals {
        let mut eq = DVector::zeros(problem.eq.len());
        for (k, (i, s)) in self.eq_keep.iter().enumerate() {
            eq[*i] = y[k] / s;
        }
        let ineq = DVector::from_iterator(
            self.ineq_scale.len(),
            self.ineq_scale.iter().enumerate().map(|(i, s)| z[i] / s),
        );
        let quad = DVector::from_iterator(
            self.quad_rows.len(),
            self.quad_rows.iter().map(|(row, s)| match row {
                QuadRow::Linear(i) => z[*i] / s,
                QuadRow::Cone(start) => (z[*start] + z[*start + 1]) / s,
            }),
        );
        Duals { eq, ineq, quad }
    }
}

struct OwnedScales {
    eq: Vec<(usize, f64)>,
    ineq: Vec<f64>,
    quad: Vec<f64>,
}

impl OwnedScales {
    fn as_ref(&self) -> RowScales<'_> {
        RowScales {
            eq: &self.eq,
            ineq: &self.ineq,
            quad: &self.quad,
        }
    }
}

struct Infeasible(#[allow(dead_code)] String);

/// Dense LU of the scaled KKT matrix
///
/// ```text
///     [ P   Aᵀ  Ĝᵀ ]
///     [ A   0   0  ]      Ĝ = W⁻¹ G
///     [ Ĝ   0   −I ]
/// ```
///
/// with a tiny static regularization and iterative refinement against the
/// exact matrix.
struct KktSolver {
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    k: DMatrix<f64>,
    n: usize,
    p: usize,
}

impl KktSolver {
    fn new(pm: &DMatrix<f64>, a: &DMatrix<f64>, g_hat: &DMatrix<f64>) -> Option<Self> {
        let n = pm.nrows();
        let p = a.nrows();
        let m = g_hat.nrows();
        let dim = n + p + m;
        let mut k = DMatrix::zeros(dim, dim);
        k.view_mut((0, 0), (n, n)).copy_from(pm);
        k.view_mut((n, 0), (p, n)).copy_from(a);
        k.view_mut((0, n), (n, p)).copy_from(&a.transpose());
        k.view_mut((n + p, 0), (m, n)).copy_from(g_hat);
        k.view_mut((0, n + p), (n, m)).copy_from(&g_hat.transpose());
        for i in n + p..dim {
            k[(i, i)] = -1.0;
        }
        let reg = 1e-12 * k.amax().max(1.0);
        let mut kr = k.clone();
        for i in 0..n {
            kr[(i, i)] += reg;
        }
        for i in n..n + p {
            kr[(i, i)] -= reg;
        }
        let lu = kr.lu();
        if !lu.is_invertible() {
            return None;
        }
        Some(Self { lu, k, n, p })
    }

    /// Returns `(dx, dy, u)` for right-hand side `(rx, ry, rz)`.
    fn solve(
        &self,
        rx: &DVector<f64>,
        ry: &DVector<f64>,
        rz: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let (n, p) = (self.n, self.p);
        let mut rhs = DVector::zeros(self.k.nrows());
        rhs.rows_mut(0, n).copy_from(rx);
        rhs.rows_mut(n, p).copy_from(ry);
        rhs.rows_mut(n + p, rz.len()).copy_from(rz);
        let mut sol = self.lu.solve(&rhs)?;
        for _ in 0..3 {
            let res = &rhs - &self.k * &sol;
            sol += self.lu.solve(&res)?;
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((
            sol.rows(0, n).into_owned(),
            sol.rows(n, p).into_owned(),
            sol.rows(n + p, rz.len()).into_owned(),
        ))
    }
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: DVector<f64>,
    ds: DVector<f64>,
}

/// Solves a convex QCQP. Input defects (dimensions, non-finite data, a
/// non-PSD block) are errors; solver outcomes are reported in the status.
pub fn solve(problem: &ConvexQcqp, options: &SolverOptions) -> Result<SolverSolution, QcqpError> {
    problem.validate()?;
    let report = check_convexity(problem);
    if let Some(bad) = report.failing().next() {
        return Err(QcqpError::NotConvex {
            block: bad.name.clone(),
            min_eigenvalue: bad.min_eigenvalue,
        });
    }
    if problem.n == 0 {
        return Ok(trivial(problem));
    }
    let form = match ConicForm::build(problem) {
        Ok(f) => f,
        Err(_) => return Ok(failed(problem, SolveStatus::Infeasible, 0)),
    };
    let ConicForm {
        ref p,
        ref c,
        r0,
        ref a,
        ref b,
        ref g,
        ref h,
        ref cones,
        ..
    } = form;
    let tol = options.tol;
    let data_scale_p = 1.0 + b.amax().max(h.amax());
    let data_scale_d = 1.0 + c.amax();

    // Initial point from the W = I KKT system, then shifted into the cone.
    let kkt0 = match KktSolver::new(p, a, g) {
        Some(k) => k,
        None => return Ok(failed(problem, SolveStatus::Numerical, 0)),
    };
    let (mut x, mut y) = match kkt0.solve(&(-c), b, h) {
        Some((x, y, _)) => (x, y),
        None => return Ok(failed(problem, SolveStatus::Numerical, 0)),
    };
    let mut s = h - g * &x;
    let mut z = -s.clone();
    cones.push_inside(&mut s);
    cones.push_inside(&mut z);

    let degree = cones.degree().max(1) as f64;
    let e = cones.identity();
    let mut stalls = 0usize;

    for iter in 0..=options.max_iter {
        let px = p * &x;
        let rx = &px + c + a.tr_mul(&y) + g.tr_mul(&z);
        let ry = a * &x - b;
        let rz = g * &x + &s - h;
        let pobj = 0.5 * x.dot(&px) + c.dot(&x) + r0;
        let gap = s.dot(&z);
        let kkt = KktResiduals {
            stationarity: rx.amax() / data_scale_d,
            primal: ry.amax().max(rz.amax()) / data_scale_p,
            dual: (-cones.min_eig(&z)).max(0.0),
            gap: gap.max(0.0) / (1.0 + pobj.abs()),
        };
        let finish = |status: SolveStatus, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| {
            let dobj = pobj + y.dot(&ry) + z.dot(&rz) - gap;
            SolverSolution {
                x: x.clone(),
                duals: form.duals(problem, y, z),
                status,
                kkt,
                iterations: iter,
                objective: problem.objective.eval(x),
                dual_objective: dobj,
                polished: false,
            }
        };

        if kkt.max() <= tol || cones.dim() == 0 && kkt.stationarity.max(kkt.primal) <= tol {
            let mut sol = finish(SolveStatus::Optimal, &x, &y, &z);
            if options.polish {
                let scales = form.row_scales();
                if let Some(p) = polish(problem, &sol.x, &sol.duals, &scales.as_ref(), tol) {
                    sol.dual_objective = lagrangian(problem, &p.x, &p.duals);
                    sol.objective = problem.objective.eval(&p.x);
                    sol.x = p.x;
                    sol.duals = p.duals;
                    sol.polished = true;
                }
            }
            return Ok(sol);
        }
        if iter > 3 && kkt.primal > tol && primal_infeasible(a, b, g, h, &y, &z, tol) {
            return Ok(finish(SolveStatus::Infeasible, &x, &y, &z));
        }
        if iter == options.max_iter {
            return Ok(finish(SolveStatus::MaxIter, &x, &y, &z));
        }

        let w = match NtScaling::new(cones, &s, &z) {
            Some(w) => w,
            None => return Ok(finish(SolveStatus::Numerical, &x, &y, &z)),
        };
        let lambda = w.apply(&z);
        let g_hat = w.apply_inv_rows(g);
        let kkt_solver = match KktSolver::new(p, a, &g_hat) {
            Some(k) => k,
            None => return Ok(finish(SolveStatus::Numerical, &x, &y, &z)),
        };

        // Ĝ dx − W dz = W⁻¹ r3 with r3 = −rz − W(λ ⊘ rs)
        let direction = |rs: &DVector<f64>| -> Option<Direction> {
            let lam_div = cones.inv_product(&lambda, rs);
            let r3 = -&rz - w.apply(&lam_div);
            let (dx, dy, u) = kkt_solver.solve(&(-&rx), &(-&ry), &w.apply_inv(&r3))?;
            let dz = w.apply_inv(&u);
            let ds = -&rz - g * &dx;
            Some(Direction { dx, dy, dz, ds })
        };

        let lam_sq = cones.product(&lambda, &lambda);
        let aff = match direction(&(-&lam_sq)) {
            Some(d) => d,
            None => return Ok(finish(SolveStatus::Numerical, &x, &y, &z)),
        };
        let alpha_aff = cones
            .max_step(&s, &aff.ds)
            .min(cones.max_step(&z, &aff.dz))
            .min(1.0);
        let gap_aff = (&s + &aff.ds * alpha_aff).dot(&(&z + &aff.dz * alpha_aff));
        let sigma = if gap > 0.0 {
            (gap_aff / gap).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };
        let mu = gap / degree;

        let corr = cones.product(&w.apply_inv(&aff.ds), &w.apply(&aff.dz));
        let rs = -&lam_sq - corr + &e * (sigma * mu);
        let dir = match direction(&rs) {
            Some(d) => d,
            None => return Ok(finish(SolveStatus::Numerical, &x, &y, &z)),
        };
        let max_step = cones.max_step(&s, &dir.ds).min(cones.max_step(&z, &dir.dz));
        let alpha = (0.99 * max_step).min(1.0);
        if alpha < 1e-10 {
            stalls += 1;
            if stalls > 5 {
                return Ok(finish(SolveStatus::Numerical, &x, &y, &z));
            }
        } else {
            stalls = 0;
        }
        x += &dir.dx * alpha;
        y += &dir.dy * alpha;
        z += &dir.dz * alpha;
        s += &dir.ds * alpha;
    }
    unreachable!("loop returns at max_iter")
}

/// Farkas certificate: `Aᵀy + Gᵀz ≈ 0` with `bᵀy + hᵀz < 0` and `z ∈ K*`.
fn primal_infeasible(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    g: &DMatrix<f64>,
    h: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    tol: f64,
) -> bool {
    let t = -(b.dot(y) + h.dot(z));
    if t <= 0.0 {
        return false;
    }
    let res = (a.tr_mul(y) + g.tr_mul(z)).amax();
    res / t < tol && z.amax() > 1e6
}

/// Zero-variable problems reduce to checking the constant terms.
fn trivial(problem: &ConvexQcqp) -> SolverSolution {
    let x = DVector::zeros(0);
    let feasible = problem.max_violation(&x) <= 0.0;
    let status = if feasible {
        SolveStatus::Optimal
    } else {
        SolveStatus::Infeasible
    };
    let mut sol = failed(problem, status, 0);
    if feasible {
        sol.kkt = KktResiduals::default();
        sol.dual_objective = sol.objective;
    }
    sol
}

fn failed(problem: &ConvexQcqp, status: SolveStatus, iterations: usize) -> SolverSolution {
    let x = DVector::zeros(problem.n);
    SolverSolution {
        objective: problem.objective.eval(&x),
        dual_objective: f64::NEG_INFINITY,
        x,
        duals: Duals {
            eq: DVector::zeros(problem.eq.len()),
            ineq: DVector::zeros(problem.ineq.len()),
            quad: DVector::zeros(problem.quad.len()),
        },
        status,
        kkt: KktResiduals {
            stationarity: f64::INFINITY,
            primal: f64::INFINITY,
            dual: f64::INFINITY,
            gap: f64::INFINITY,
        },
        iterations,
        polished: false,
    }
}

fn lagrangian(problem: &ConvexQcqp, x: &DVector<f64>, d: &Duals) -> f64 {
    let mut l = problem.objective.eval(x);
    l += d.eq.dot(&(&problem.eq.a * x - &problem.eq.b));
    l += d.ineq.dot(&(&problem.ineq.a * x - &problem.ineq.b));
    for (f, m) in problem.quad.iter().zip(d.quad.iter()) {
        l += m * f.eval(x);
    }
    l
}
