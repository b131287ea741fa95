//! Small dense convex QCQP solver.
//!
//! Solves problems of the form
//!
//! ```text
//!     minimize     ½ xᵀ P₀ x + q₀ᵀ x + r₀
//!     subject to   A x  = b
//!                  G x <= h
//!                  ½ xᵀ Pᵢ x + qᵢᵀ x + rᵢ <= 0
//! ```
//!
//! with a primal-dual interior-point method ([`solve`]). All `P` matrices
//! must be positive semidefinite; [`check_convexity`] reports which block
//! fails otherwise. The solver is dense throughout and intended for problems
//! with tens to a few hundred variables.
//!
//! # Example
//!
//! ```
//! use foid_qcqp::{solve, ConvexQcqp, Quadratic, SolverOptions};
//! use nalgebra::{DMatrix, DVector};
//!
//! // min x² s.t. x >= 1
//! let mut b = ConvexQcqp::builder(Quadratic::new(
//!     DMatrix::from_element(1, 1, 2.0),
//!     DVector::zeros(1),
//!     0.0,
//! ));
//! b.le(DVector::from_element(1, -1.0), -1.0, "x >= 1");
//! let sol = solve(&b.build(), &SolverOptions::default()).unwrap();
//! assert!(sol.is_optimal());
//! assert!((sol.x[0] - 1.0).abs() < 1e-6);
//! ```

mod cone;
mod convexity;
mod ipm;
mod polish;
mod problem;

pub use convexity::{check_convexity, is_psd, BlockCheck, ConvexityReport, PSD_TOL};
pub use ipm::{solve, Duals, KktResiduals, SolveStatus, SolverOptions, SolverSolution};
pub use problem::{ConvexQcqp, LinearRows, QcqpBuilder, Quadratic};

#[derive(Debug, thiserror::Error)]
pub enum QcqpError {
    #[error("dimension mismatch in {0}")]
    Dimension(String),
    #[error("non-finite data in {0}")]
    NonFinite(String),
    #[error("block `{block}` is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotConvex { block: String, min_eigenvalue: f64 },
    #[error("problem dump {path}: {message}")]
    Dump { path: String, message: String },
}
