//! PSD verification of every quadratic block.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ConvexQcqp;

/// Relative tolerance used for the PSD test.
pub const PSD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub min_eigenvalue: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub blocks: Vec<BlockCheck>,
}

impl ConvexityReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks.iter().filter(|b| !b.passed)
    }
}

fn symmetric_part(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

fn scale_of(p: &DMatrix<f64>) -> f64 {
    p.amax().max(1.0)
}

/// A block passes when `P + tol·scale·I` admits a Cholesky factorization.
pub fn is_psd(p: &DMatrix<f64>) -> bool {
    if p.nrows() == 0 {
        return true;
    }
    let sym = symmetric_part(p);
    let shift = PSD_TOL * scale_of(&sym);
    let shifted = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * shift;
    shifted.cholesky().is_some()
}

fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    if p.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetric_part(p)).eigenvalues.min()
}

/// Checks the objective and every quadratic constraint. Never fails; the
/// report lists each block.
pub fn check_convexity(problem: &ConvexQcqp) -> ConvexityReport {
    let mut blocks = Vec::with_capacity(problem.quad.len() + 1);
    let mut check = |name: String, p: &DMatrix<f64>| {
        blocks.push(BlockCheck {
            name,
            min_eigenvalue: min_eigenvalue(p),
            passed: is_psd(p),
        });
    };
    check("objective".to_string(), &problem.objective.p);
    for (i, c) in problem.quad.iter().enumerate() {
        check(problem.quad_label(i), &c.p);
    }
    ConvexityReport { blocks }
}

/// Returns `L` (n×k) with `L Lᵀ = P`, dropping numerically null directions.
pub(crate) fn psd_factor(p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = SymmetricEigen::new(symmetric_part(p));
    let top = eig.eigenvalues.max().max(0.0);
    let keep: Vec<usize> = (0..n)
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * top.max(1e-300))
        .collect();
    let mut l = DMatrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        let s = eig.eigenvalues[i].sqrt();
        l.set_column(j, &(eig.eigenvectors.column(i) * s));
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Quadratic;
    use nalgebra::DVector;

    #[test]
    fn identity_passes() {
        let p = ConvexQcqp::new(Quadratic::new(DMatrix::identity(3, 3), DVector::zeros(3), 0.0));
        assert!(check_convexity(&p).passed());
    }

    #[test]
    fn negative_eigenvalue_fails_and_names_block() {
        let mut b = ConvexQcqp::builder(Quadratic::zeros(2));
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.1]));
        b.quad(Quadratic::new(bad, DVector::zeros(2), -1.0), "tilted");
        let report = check_convexity(&b.build());
        assert!(!report.passed());
        let failing: Vec<_> = report.failing().collect();
        assert_eq!(failing.len(), 1);
        assert_eq!(failing[0].name, "tilted");
        assert!((failing[0].min_eigenvalue + 0.1).abs() < 1e-12);
    }

    #[test]
    fn singular_psd_passes() {
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let p = &g * g.transpose();
        assert!(is_psd(&p));
    }

    #[test]
    fn factor_reconstructs_rank_deficient_matrix() {
        let g = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let p = &g * g.transpose() * 3.0;
        let l = psd_factor(&p);
        assert_eq!(l.ncols(), 1);
        assert!((&l * l.transpose() - p).amax() < 1e-12);
    }
}
