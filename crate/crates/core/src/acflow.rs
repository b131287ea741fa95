//! Exact AC power flow by Z-bus fixed-point iteration.
//!
//! Solves `V = w + Z·conj(S / V)` for the non-slack buses, where `Z` is the
//! inverse of the reduced admittance matrix and `w` the no-load voltage set
//! by the slack. Used only to check the linear model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linflow::{voltages_from_injections, FlowError, InjectionVector, VoltageProfile};
use crate::netmodel::{build_ybus, reduced_ybus, NetworkError, NetworkModel, SensitivityMatrices, C64};

#[derive(Debug, thiserror::Error)]
pub enum AcError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("AC power flow did not converge after {iterations} iterations (residual {residual:.3e} pu)")]
    NotConverged { iterations: usize, residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AcOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcSolveReport {
    pub profile: VoltageProfile,
    pub iterations: usize,
    /// Largest complex power mismatch over non-slack buses (pu).
    pub residual: f64,
    pub converged: bool,
}

/// Reusable factorization for repeated AC solves on one network.
#[derive(Debug, Clone)]
pub struct AcSolver {
    ybus: DMatrix<C64>,
    z: DMatrix<C64>,
    w: DVector<C64>,
    keep: Vec<usize>,
    v_nom: f64,
}

impl AcSolver {
    pub fn new(net: &NetworkModel) -> Result<Self, NetworkError> {
        let ybus = build_ybus(net)?;
        let slack = net.slack();
        let (red, keep) = reduced_ybus(&ybus, slack);
        let z = red.try_inverse().ok_or(NetworkError::Singular)?;
        let v0 = C64::new(net.v_nom, 0.0);
        let y_rs = DVector::from_iterator(keep.len(), keep.iter().map(|&i| ybus[(i, slack)]));
        let w = -(&z * y_rs) * v0;
        Ok(Self {
            ybus,
            z,
            w,
            keep,
            v_nom: net.v_nom,
        })
    }

    fn mismatch(&self, full: &DVector<C64>, s: &DVector<C64>) -> f64 {
        let i_inj = &self.ybus * full;
        self.keep
            .iter()
            .enumerate()
            .map(|(k, &b)| (full[b] * i_inj[b].conj() - s[k]).norm())
            .fold(0.0, f64::max)
    }

    fn full(&self, v: &DVector<C64>) -> DVector<C64> {
        let mut full = DVector::from_element(self.keep.len() + 1, C64::new(self.v_nom, 0.0));
        for (k, &b) in self.keep.iter().enumerate() {
            full[b] = v[k];
        }
        full
    }

    pub fn solve(&self, inj: &InjectionVector, opts: &AcOptions) -> Result<AcSolveReport, FlowError> {
        let n = self.keep.len();
        if inj.p_net.len() != n || inj.q_net.len() != n {
            return Err(FlowError::Dimension {
                what: "injection",
                expected: n,
                got: inj.p_net.len(),
            });
        }
        let s = DVector::from_fn(n, |k, _| C64::new(inj.p_net[k], inj.q_net[k]));
        let mut v = self.w.clone();
        let mut alpha = 1.0;
        let mut residual = self.mismatch(&self.full(&v), &s);
        let mut iterations = 0;
        while residual >= opts.tol && iterations < opts.max_iter {
            let current = DVector::from_fn(n, |k, _| (s[k] / v[k]).conj());
            let next = &self.w + &self.z * current;
            let trial = &v * C64::new(1.0 - alpha, 0.0) + next * C64::new(alpha, 0.0);
            let r = self.mismatch(&self.full(&trial), &s);
            if r > residual && alpha == 1.0 {
                alpha = 0.5;
            }
            v = trial;
            residual = r;
            iterations += 1;
        }
        let full = self.full(&v);
        Ok(AcSolveReport {
            profile: VoltageProfile {
                v_re: full.map(|c| c.re),
                v_im: full.map(|c| c.im),
            },
            iterations: iterations.max(1),
            residual,
            converged: residual < opts.tol,
        })
    }
}

pub fn solve_ac(net: &NetworkModel, inj: &InjectionVector) -> Result<AcSolveReport, AcError> {
    Ok(AcSolver::new(net)?.solve(inj, &AcOptions::default())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearizationError {
    /// `|V_lin| − |V_ac|` per bus (pu).
    pub per_bus: Vec<f64>,
    /// `Re V_lin − |V_ac|` per bus: the error in the quantity that the
    /// voltage constraints bound.
    pub bound_per_bus: Vec<f64>,
    pub max_abs: f64,
    pub max_abs_bound: f64,
}

pub fn linearization_error(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    inj: &InjectionVector,
) -> Result<LinearizationError, AcError> {
    linearization_error_with(&AcSolver::new(net)?, net, sens, inj)
}

pub fn linearization_error_with(
    solver: &AcSolver,
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    inj: &InjectionVector,
) -> Result<LinearizationError, AcError> {
    let ac = solver.solve(inj, &AcOptions::default())?;
    if !ac.converged {
        return Err(AcError::NotConverged {
            iterations: ac.iterations,
            residual: ac.residual,
        });
    }
    let lin = voltages_from_injections(sens, inj, net.v_nom)?;
    let ac_mag = ac.profile.magnitudes();
    let per_bus: Vec<f64> = lin.magnitudes().iter().zip(&ac_mag).map(|(l, a)| l - a).collect();
    let bound_per_bus: Vec<f64> = lin.v_re.iter().zip(&ac_mag).map(|(l, a)| l - a).collect();
    let amax = |v: &[f64]| v.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    Ok(LinearizationError {
        max_abs: amax(&per_bus),
        max_abs_bound: amax(&bound_per_bus),
        per_bus,
        bound_per_bus,
    })
}
