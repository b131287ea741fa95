//! Canonical convex QCQP description.
//!
//! ```text
//!     minimize     ½ xᵀ P₀ x + q₀ᵀ x + r₀
//!     subject to   A x  = b
//!                  G x <= h
//!                  ½ xᵀ Pᵢ x + qᵢᵀ x + rᵢ <= 0,   i = 1..k
//! ```
//!
//! Every `P` must be positive semidefinite; [`crate::check_convexity`] verifies this.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::QcqpError;

/// A scalar quadratic form `½ xᵀ P x + qᵀ x + r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

impl Quadratic {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, r: f64) -> Self {
        Self { p, q, r }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, n), DVector::zeros(n), 0.0)
    }

    /// A purely affine function `qᵀ x + r`.
    pub fn affine(q: DVector<f64>, r: f64) -> Self {
        let n = q.len();
        Self::new(DMatrix::zeros(n, n), q, r)
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x) + self.r
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * x + &self.q
    }

    /// Adds `w · (gᵀx + g0)²` to this form.
    pub fn add_squared_affine(&mut self, w: f64, g: &DVector<f64>, g0: f64) {
        self.p += 2.0 * w * g * g.transpose();
        self.q += 2.0 * w * g0 * g;
        self.r += w * g0 * g0;
    }

    fn is_finite(&self) -> bool {
        self.p.iter().all(|v| v.is_finite()) && self.q.iter().all(|v| v.is_finite()) && self.r.is_finite()
    }
}

/// Stacked linear rows, `A x (= or <=) b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRows {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearRows {
    pub fn empty(n: usize) -> Self {
        Self {
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
        }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    fn from_rows(n: usize, rows: &[(DVector<f64>, f64)]) -> Self {
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (i, (row, rhs)) in rows.iter().enumerate() {
            a.set_row(i, &row.transpose());
            b[i] = *rhs;
        }
        Self { a, b }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexQcqp {
    pub n: usize,
    pub objective: Quadratic,
    pub eq: LinearRows,
    pub ineq: LinearRows,
    pub quad: Vec<Quadratic>,
    /// Optional names for diagnostics; either empty or one per row.
    #[serde(default)]
    pub ineq_labels: Vec<String>,
    #[serde(default)]
    pub quad_labels: Vec<String>,
}

impl ConvexQcqp {
    /// Unconstrained problem with the given objective.
    pub fn new(objective: Quadratic) -> Self {
        let n = objective.dim();
        Self {
            n,
            objective,
            eq: LinearRows::empty(n),
            ineq: LinearRows::empty(n),
            quad: Vec::new(),
            ineq_labels: Vec::new(),
            quad_labels: Vec::new(),
        }
    }

    pub fn builder(objective: Quadratic) -> QcqpBuilder {
        QcqpBuilder {
            n: objective.dim(),
            objective,
            eq: Vec::new(),
            ineq: Vec::new(),
            ineq_labels: Vec::new(),
            quad: Vec::new(),
            quad_labels: Vec::new(),
        }
    }

    pub fn ineq_label(&self, i: usize) -> String {
        self.ineq_labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("ineq[{i}]"))
    }

    pub fn quad_label(&self, i: usize) -> String {
        self.quad_labels
            .get(i)
            .cloned()
            .unwrap_or_else(|| format!("quad[{i}]"))
    }

    /// Checks dimensions and finiteness. Convexity is checked separately.
    pub fn validate(&self) -> Result<(), QcqpError> {
        let n = self.n;
        let dim_err = |what: &str| Err(QcqpError::Dimension(what.to_string()));
        if self.objective.p.shape() != (n, n) || self.objective.q.len() != n {
            return dim_err("objective");
        }
        if self.eq.a.ncols() != n || self.eq.a.nrows() != self.eq.b.len() {
            return dim_err("equality rows");
        }
        if self.ineq.a.ncols() != n || self.ineq.a.nrows() != self.ineq.b.len() {
            return dim_err("inequality rows");
        }
        if !self.ineq_labels.is_empty() && self.ineq_labels.len() != self.ineq.len() {
            return dim_err("inequality labels");
        }
        if !self.quad_labels.is_empty() && self.quad_labels.len() != self.quad.len() {
            return dim_err("quadratic labels");
        }
        for (i, c) in self.quad.iter().enumerate() {
            if c.p.shape() != (n, n) || c.q.len() != n {
                return Err(QcqpError::Dimension(self.quad_label(i)));
            }
            if !c.is_finite() {
                return Err(QcqpError::NonFinite(self.quad_label(i)));
            }
        }
        if !self.objective.is_finite() {
            return Err(QcqpError::NonFinite("objective".into()));
        }
        let lin_finite = |r: &LinearRows| r.a.iter().chain(r.b.iter()).all(|v| v.is_finite());
        if !lin_finite(&self.eq) || !lin_finite(&self.ineq) {
            return Err(QcqpError::NonFinite("linear rows".into()));
        }
        Ok(())
    }

    /// Largest violation of any constraint at `x` (zero when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.eq.a * x - &self.eq.b).amax();
        let ineq = (&self.ineq.a * x - &self.ineq.b)
            .iter()
            .fold(0.0_f64, |m, v| m.max(*v));
        let quad = self.quad.iter().fold(0.0_f64, |m, c| m.max(c.eval(x)));
        eq.max(ineq).max(quad)
    }

    /// Writes the canonical problem as JSON for external cross-checking.
    pub fn dump_json(&self, path: impl AsRef<Path>) -> Result<(), QcqpError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| QcqpError::Dump {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| QcqpError::Dump {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, QcqpError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QcqpError::Dump {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| QcqpError::Dump {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Row-at-a-time construction of a [`ConvexQcqp`].
#[derive(Debug, Clone)]
pub struct QcqpBuilder {
    n: usize,
    objective: Quadratic,
    eq: Vec<(DVector<f64>, f64)>,
    ineq: Vec<(DVector<f64>, f64)>,
    ineq_labels: Vec<String>,
    quad: Vec<Quadratic>,
    quad_labels: Vec<String>,
}

impl QcqpBuilder {
    /// `rowᵀ x = rhs`
    pub fn eq(&mut self, row: DVector<f64>, rhs: f64) -> &mut Self {
        self.eq.push((row, rhs));
        self
    }

    /// `rowᵀ x <= rhs`
    pub fn le(&mut self, row: DVector<f64>, rhs: f64, label: impl Into<String>) -> &mut Self {
        self.ineq.push((row, rhs));
        self.ineq_labels.push(label.into());
        self
    }

    /// `f(x) <= 0`
    pub fn quad(&mut self, f: Quadratic, label: impl Into<String>) -> &mut Self {
        self.quad.push(f);
        self.quad_labels.push(label.into());
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn build(self) -> ConvexQcqp {
        ConvexQcqp {
            n: self.n,
            eq: LinearRows::from_rows(self.n, &self.eq),
            ineq: LinearRows::from_rows(self.n, &self.ineq),
            objective: self.objective,
            quad: self.quad,
            ineq_labels: self.ineq_labels,
            quad_labels: self.quad_labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_affine_matches_direct_evaluation() {
        let mut f = Quadratic::zeros(2);
        let g = DVector::from_vec(vec![1.0, -2.0]);
        f.add_squared_affine(3.0, &g, 0.5);
        let x = DVector::from_vec(vec![0.3, 0.7]);
        let direct = 3.0 * (g.dot(&x) + 0.5).powi(2);
        assert!((f.eval(&x) - direct).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_mismatched_rows() {
        let mut p = ConvexQcqp::new(Quadratic::zeros(2));
        p.ineq = LinearRows {
            a: DMatrix::zeros(1, 3),
            b: DVector::zeros(1),
        };
        assert!(matches!(p.validate(), Err(QcqpError::Dimension(_))));
    }

    #[test]
    fn max_violation_reports_worst_row() {
        let mut b = ConvexQcqp::builder(Quadratic::zeros(1));
        b.le(DVector::from_vec(vec![1.0]), 1.0, "x<=1");
        b.quad(
            Quadratic::new(DMatrix::from_element(1, 1, 2.0), DVector::zeros(1), -4.0),
            "x^2<=4",
        );
        let p = b.build();
        assert_eq!(p.max_violation(&DVector::from_vec(vec![0.5])), 0.0);
        assert!((p.max_violation(&DVector::from_vec(vec![3.0])) - 5.0).abs() < 1e-12);
    }
}
