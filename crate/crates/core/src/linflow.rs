//! Linearized power flow around the flat profile.
//!
//! With `R + jX` the inverse of the slack-reduced admittance matrix and
//! `p`, `q` the net injections (generation minus load) at non-slack buses:
//!
//! ```text
//!     Re V = V_nom + R p + X q
//!     Im V =         X p − R q
//! ```

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::netmodel::{NetworkModel, SensitivityMatrices};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FlowError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}: non-finite entry")]
    NonFinite(&'static str),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), FlowError> {
    if expected == got {
        Ok(())
    } else {
        Err(FlowError::Dimension { what, expected, got })
    }
}

/// Constant-power demand per bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loads {
    pub p_kw: Vec<f64>,
    pub q_kvar: Vec<f64>,
}

impl Loads {
    pub fn from_network(net: &NetworkModel) -> Self {
        Self {
            p_kw: net.buses.iter().map(|b| b.load_p).collect(),
            q_kvar: net.buses.iter().map(|b| b.load_q).collect(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            p_kw: vec![0.0; n],
            q_kvar: vec![0.0; n],
        }
    }

    pub fn total_p_kw(&self) -> f64 {
        self.p_kw.iter().sum()
    }
}

/// Net injections at non-slack buses, in the row order of the sensitivity
/// matrices (pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionVector {
    pub p_net: DVector<f64>,
    pub q_net: DVector<f64>,
}

impl InjectionVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            p_net: DVector::zeros(n),
            q_net: DVector::zeros(n),
        }
    }

    /// Injections from per-household inverter output (kW, kVAr) minus the
    /// per-bus loads.
    pub fn from_households(
        net: &NetworkModel,
        sens: &SensitivityMatrices,
        loads: &Loads,
        p_out_kw: &[f64],
        q_out_kvar: &[f64],
    ) -> Result<Self, FlowError> {
        let hh = net.households();
        check_len("household active output", hh.len(), p_out_kw.len())?;
        check_len("household reactive output", hh.len(), q_out_kvar.len())?;
        check_len("loads", net.buses.len(), loads.p_kw.len())?;
        check_len("loads", net.buses.len(), loads.q_kvar.len())?;
        let mut p_kw: Vec<f64> = loads.p_kw.iter().map(|l| -l).collect();
        let mut q_kvar: Vec<f64> = loads.q_kvar.iter().map(|l| -l).collect();
        for (h, &b) in hh.iter().enumerate() {
            p_kw[b] += p_out_kw[h];
            q_kvar[b] += q_out_kvar[h];
        }
        Self::from_bus_kw(net, sens, &p_kw, &q_kvar)
    }

    /// Injections from full per-bus vectors in kW / kVAr (slack entry ignored).
    pub fn from_bus_kw(
        net: &NetworkModel,
        sens: &SensitivityMatrices,
        p_kw: &[f64],
        q_kvar: &[f64],
    ) -> Result<Self, FlowError> {
        check_len("bus active injection", net.buses.len(), p_kw.len())?;
        check_len("bus reactive injection", net.buses.len(), q_kvar.len())?;
        let inj = Self {
            p_net: DVector::from_iterator(sens.dim(), sens.buses.iter().map(|&b| net.kw_to_pu(p_kw[b]))),
            q_net: DVector::from_iterator(sens.dim(), sens.buses.iter().map(|&b| net.kw_to_pu(q_kvar[b]))),
        };
        inj.check(sens.dim())?;
        Ok(inj)
    }

    fn check(&self, n: usize) -> Result<(), FlowError> {
        check_len("injection p", n, self.p_net.len())?;
        check_len("injection q", n, self.q_net.len())?;
        if self.p_net.iter().chain(self.q_net.iter()).any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("injection"));
        }
        Ok(())
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            p_net: &self.p_net * a,
            q_net: &self.q_net * a,
        }
    }
}

/// Complex bus voltages for every bus, slack included (pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageProfile {
    pub v_re: DVector<f64>,
    pub v_im: DVector<f64>,
}

impl VoltageProfile {
    pub fn flat(n: usize, v_nom: f64) -> Self {
        Self {
            v_re: DVector::from_element(n, v_nom),
            v_im: DVector::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.v_re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v_re.is_empty()
    }

    pub fn magnitude(&self, bus: usize) -> f64 {
        self.v_re[bus].hypot(self.v_im[bus])
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.magnitude(i)).collect()
    }
}

pub fn voltages_from_injections(
    sens: &SensitivityMatrices,
    inj: &InjectionVector,
    v_nom: f64,
) -> Result<VoltageProfile, FlowError> {
    inj.check(sens.dim())?;
    let re = &sens.r * &inj.p_net + &sens.x * &inj.q_net;
    let im = &sens.x * &inj.p_net - &sens.r * &inj.q_net;
    let n = sens.dim() + 1;
    let mut prof = VoltageProfile::flat(n, v_nom);
    for (k, &b) in sens.buses.iter().enumerate() {
        prof.v_re[b] += re[k];
        prof.v_im[b] = im[k];
    }
    Ok(prof)
}

/// The quantity the voltage limits act on: `Re V` at every bus.
pub fn voltage_bound_expression(
    sens: &SensitivityMatrices,
    inj: &InjectionVector,
    v_nom: f64,
) -> Result<DVector<f64>, FlowError> {
    Ok(voltages_from_injections(sens, inj, v_nom)?.v_re)
}

/// `|y*_mn (V_m − V_n)|` per line (pu).
pub fn line_current_magnitudes(net: &NetworkModel, profile: &VoltageProfile) -> Vec<f64> {
    net.lines
        .iter()
        .map(|l| {
            let y = net.line_y_pu(l);
            let dre = profile.v_re[l.from] - profile.v_re[l.to];
            let dim = profile.v_im[l.from] - profile.v_im[l.to];
            y.norm() * dre.hypot(dim)
        })
        .collect()
}

/// Ohmic losses `Σ Re{y} |V_m − V_n|²` in kW.
pub fn line_losses(net: &NetworkModel, profile: &VoltageProfile) -> f64 {
    let pu: f64 = net
        .lines
        .iter()
        .map(|l| {
            let g = net.line_y_pu(l).re;
            let dre = profile.v_re[l.from] - profile.v_re[l.to];
            let dim = profile.v_im[l.from] - profile.v_im[l.to];
            g * (dre * dre + dim * dim)
        })
        .sum();
    net.pu_to_kw(pu)
}

/// Apparent power through the transformer (kVA): net bus injections plus
/// active losses, independent of flow direction.
pub fn transformer_apparent_power(net: &NetworkModel, inj: &InjectionVector, losses_kw: f64) -> f64 {
    let p0 = -net.pu_to_kw(inj.p_net.sum()) + losses_kw;
    let q0 = -net.pu_to_kw(inj.q_net.sum());
    p0.hypot(q0)
}
