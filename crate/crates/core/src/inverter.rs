//! Inverter capability limits and the Volt/VAr droop controller with
//! Volt/Watt fallback.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linflow::{voltages_from_injections, FlowError, InjectionVector, Loads, VoltageProfile};
use crate::netmodel::{NetworkModel, SensitivityMatrices};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InverterError {
    #[error("inverter at bus {bus}: {message}")]
    InvalidSpec { bus: usize, message: String },
    #[error("curtailment {p_c} kW outside [0, {p_av}] kW")]
    CurtailmentOutOfRange { p_c: f64, p_av: f64 },
    #[error("droop curve: {0}")]
    InvalidCurve(String),
    #[error("fleet does not match the network households: {0}")]
    FleetMismatch(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverterSpec {
    /// Household bus index.
    pub bus: usize,
    /// Available AC power, kW.
    pub p_av: f64,
    /// Apparent power rating, kVA.
    pub s_rating: f64,
    pub pf_min: f64,
    /// Derating from installed DC capacity to `p_av`.
    pub eta: f64,
}

impl InverterSpec {
    pub fn validate(&self) -> Result<(), InverterError> {
        let bad = |m: &str| {
            Err(InverterError::InvalidSpec {
                bus: self.bus,
                message: m.to_string(),
            })
        };
        if !(self.p_av >= 0.0 && self.p_av.is_finite()) {
            return bad("p_av must be finite and >= 0");
        }
        if !(self.s_rating >= self.p_av) {
            return bad("s_rating must be >= p_av");
        }
        if !(self.pf_min > 0.0 && self.pf_min <= 1.0) {
            return bad("pf_min must lie in (0, 1]");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        Ok(())
    }

    pub fn tan_theta(&self) -> f64 {
        (1.0 / (self.pf_min * self.pf_min) - 1.0).max(0.0).sqrt()
    }

    /// Installed DC capacity, kW.
    pub fn installed_capacity(&self) -> f64 {
        self.p_av / self.eta
    }

    /// Largest `|q|` (kVAr) at active output `p_out` (kW).
    pub fn q_limit_at_output(&self, p_out: f64) -> f64 {
        let p = p_out.max(0.0);
        let by_rating = (self.s_rating * self.s_rating - p * p).max(0.0).sqrt();
        by_rating.min(self.tan_theta() * p)
    }
}

/// Reactive bounds (kVAr) at curtailment `p_c` (kW), symmetric about zero.
pub fn q_bounds(spec: &InverterSpec, p_c: f64) -> Result<(f64, f64), InverterError> {
    let slack = 1e-9 * spec.p_av.max(1.0);
    if !(p_c >= -slack && p_c <= spec.p_av + slack) {
        return Err(InverterError::CurtailmentOutOfRange { p_c, p_av: spec.p_av });
    }
    let lim = spec.q_limit_at_output(spec.p_av - p_c.clamp(0.0, spec.p_av));
    Ok((-lim, lim))
}

/// `q = clip(−m (v − v_nom), q_min, q_max)` with `m = q_min / (v_nom − v_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopCurve {
    pub v_nom: f64,
    pub v_max: f64,
    /// kVAr per pu
    pub slope: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl DroopCurve {
    pub fn new(v_nom: f64, v_max: f64, q_min: f64, q_max: f64) -> Result<Self, InverterError> {
        if !(v_max > v_nom) {
            return Err(InverterError::InvalidCurve("v_max must exceed v_nom".into()));
        }
        if !(q_min <= 0.0 && 0.0 <= q_max) {
            return Err(InverterError::InvalidCurve("need q_min <= 0 <= q_max".into()));
        }
        Ok(Self {
            v_nom,
            v_max,
            slope: q_min / (v_nom - v_max),
            q_min,
            q_max,
        })
    }

    /// Curve for an inverter whose bounds follow its current output.
    pub fn for_inverter(spec: &InverterSpec, p_c: f64, v_nom: f64, v_max: f64) -> Result<Self, InverterError> {
        let (lo, hi) = q_bounds(spec, p_c)?;
        Self::new(v_nom, v_max, lo, hi)
    }
}

pub fn droop_q(curve: &DroopCurve, v: f64) -> f64 {
    (-curve.slope * (v - curve.v_nom)).clamp(curve.q_min, curve.q_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroopOptions {
    /// Damping of the reactive update.
    pub alpha: f64,
    /// Inner fixed-point tolerance on `max |ΔV|` (pu).
    pub v_tol: f64,
    pub inner_max_iter: usize,
    pub outer_max_iter: usize,
    /// Bisection tolerance on curtailment, kW.
    pub bisect_tol: f64,
}

impl Default for DroopOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            v_tol: 1e-10,
            inner_max_iter: 2000,
            outer_max_iter: 100,
            bisect_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopResult {
    /// Per household, kW.
    pub p_c: Vec<f64>,
    /// Per household, kVAr.
    pub q_c: Vec<f64>,
    pub profile: VoltageProfile,
    /// Outer Volt/Watt iterations.
    pub iterations: usize,
    pub converged: bool,
    /// Largest distance of any `q_c` from its droop curve, kVAr.
    pub curve_residual: f64,
    pub diagnostics: Vec<String>,
}

impl DroopResult {
    pub fn total_curtailment(&self) -> f64 {
        self.p_c.iter().sum()
    }
}

/// Household-restricted linear model used inside the droop iterations.
struct DroopModel<'a> {
    fleet: &'a [InverterSpec],
    /// `Re V` at households with zero inverter output.
    v0: DVector<f64>,
    /// Sensitivity of household `Re V` to household p and q (pu/kW, pu/kVAr).
    r_hh: DMatrix<f64>,
    x_hh: DMatrix<f64>,
    v_nom: f64,
    v_max: f64,
}

struct QState {
    q: DVector<f64>,
    v: DVector<f64>,
    converged: bool,
}

impl<'a> DroopModel<'a> {
    fn new(
        net: &NetworkModel,
        sens: &SensitivityMatrices,
        loads: &Loads,
        fleet: &'a [InverterSpec],
    ) -> Result<Self, InverterError> {
        let hh = net.households();
        if fleet.len() != hh.len() {
            return Err(InverterError::FleetMismatch(format!(
                "{} inverters for {} households",
                fleet.len(),
                hh.len()
            )));
        }
        for (spec, &b) in fleet.iter().zip(&hh) {
            if spec.bus != b {
                return Err(InverterError::FleetMismatch(format!(
                    "inverter bus {} where household bus {b} expected",
                    spec.bus
                )));
            }
            spec.validate()?;
        }
        let zero = vec![0.0; hh.len()];
        let base = InjectionVector::from_households(net, sens, loads, &zero, &zero)?;
        let prof = voltages_from_injections(sens, &base, net.v_nom)?;
        let rows: Vec<usize> = hh.iter().map(|&b| sens.row_of(b).expect("household is not slack")).collect();
        let n = hh.len();
        let to_pu = 1.0 / net.s_base;
        Ok(Self {
            fleet,
            v0: DVector::from_iterator(n, hh.iter().map(|&b| prof.v_re[b])),
            r_hh: DMatrix::from_fn(n, n, |i, j| sens.r[(rows[i], rows[j])] * to_pu),
            x_hh: DMatrix::from_fn(n, n, |i, j| sens.x[(rows[i], rows[j])] * to_pu),
            v_nom: net.v_nom,
            v_max: net.v_max,
        })
    }

    fn curves(&self, p_c: &[f64]) -> Vec<DroopCurve> {
        self.fleet
            .iter()
            .zip(p_c)
            .map(|(s, &c)| {
                let lim = s.q_limit_at_output(s.p_av - c);
                DroopCurve::new(self.v_nom, self.v_max, -lim, lim).expect("v_max > v_nom checked by network")
            })
            .collect()
    }

    fn output(&self, p_c: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.fleet.len(), self.fleet.iter().zip(p_c).map(|(s, c)| s.p_av - c))
    }

    fn voltages(&self, p_out: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
        &self.v0 + &self.r_hh * p_out + &self.x_hh * q
    }

    /// Damped fixed point of `q ← droop(v(q))` at fixed curtailment.
    fn q_fixed_point(&self, p_c: &[f64], q_start: &DVector<f64>, opts: &DroopOptions) -> QState {
        let curves = self.curves(p_c);
        let p_out = self.output(p_c);
        let mut q = DVector::from_fn(q_start.len(), |i, _| q_start[i].clamp(curves[i].q_min, curves[i].q_max));
        let mut v = self.voltages(&p_out, &q);
        for _ in 0..opts.inner_max_iter {
            let target = DVector::from_fn(q.len(), |i, _| droop_q(&curves[i], v[i]));
            q = &q * (1.0 - opts.alpha) + target * opts.alpha;
            let v_next = self.voltages(&p_out, &q);
            let dv = (&v_next - &v).amax();
            v = v_next;
            if dv < opts.v_tol {
                return QState { q, v, converged: true };
            }
        }
        QState { q, v, converged: false }
    }
}

/// Network-coupled droop equilibrium with simultaneous Volt/Watt bisection.
pub fn droop_equilibrium(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    loads: &Loads,
    fleet: &[InverterSpec],
) -> Result<DroopResult, InverterError> {
    droop_equilibrium_with(net, sens, loads, fleet, &DroopOptions::default())
}

pub fn droop_equilibrium_with(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    loads: &Loads,
    fleet: &[InverterSpec],
    opts: &DroopOptions,
) -> Result<DroopResult, InverterError> {
    let model = DroopModel::new(net, sens, loads, fleet)?;
    let n = fleet.len();
    let v_lim = net.v_max;
    let mut diagnostics = Vec::new();
    let mut c = vec![0.0; n];
    let mut state = model.q_fixed_point(&c, &DVector::zeros(n), opts);
    let mut iterations = 0;
    let mut converged = false;

    loop {
        if !state.converged {
            diagnostics.push(format!(
                "reactive fixed point did not settle within {} iterations",
                opts.inner_max_iter
            ));
            break;
        }
        let over: Vec<usize> = (0..n).filter(|&h| state.v[h] > v_lim + 1e-9).collect();
        if over.is_empty() {
            converged = true;
            break;
        }
        let movable: Vec<usize> = over
            .iter()
            .copied()
            .filter(|&h| fleet[h].p_av - c[h] > opts.bisect_tol)
            .collect();
        if movable.is_empty() {
            diagnostics.push(format!(
                "households {:?} exceed v_max with no curtailment left",
                over.iter().map(|h| h + 1).collect::<Vec<_>>()
            ));
            break;
        }
        if iterations == opts.outer_max_iter {
            diagnostics.push(format!("Volt/Watt fallback still active after {iterations} rounds"));
            break;
        }
        iterations += 1;

        let mut next = c.clone();
        for &h in &movable {
            let (mut lo, mut hi) = (c[h], fleet[h].p_av);
            let mut trial = c.clone();
            while hi - lo > opts.bisect_tol {
                let mid = 0.5 * (lo + hi);
                trial[h] = mid;
                let s = model.q_fixed_point(&trial, &state.q, opts);
                if s.v[h] > v_lim {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            next[h] = hi;
        }
        c = next;
        state = model.q_fixed_point(&c, &state.q, opts);
    }

    let curves = model.curves(&c);
    let q: Vec<f64> = state.q.iter().copied().collect();
    let curve_residual = (0..n)
        .map(|h| (q[h] - droop_q(&curves[h], state.v[h])).abs())
        .fold(0.0, f64::max);
    let p_out: Vec<f64> = (0..n).map(|h| fleet[h].p_av - c[h]).collect();
    let inj = InjectionVector::from_households(net, sens, loads, &p_out, &q)?;
    let profile = voltages_from_injections(sens, &inj, net.v_nom)?;
    Ok(DroopResult {
        p_c: c,
        q_c: q,
        profile,
        iterations,
        converged,
        curve_residual,
        diagnostics,
    })
}
