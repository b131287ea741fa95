//! OID / FOID assembly over the linear flow model and extraction of the
//! per-household setpoints.
//!
//! Decision vector, per household with nonzero available PV:
//! `[p_c, q_c, q⁺, q⁻]` in pu, with `q_c = q⁺ − q⁻`. Bus voltages are affine
//! in these and are substituted out.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use foid_qcqp::{
    check_convexity, solve, ConvexQcqp, KktResiduals, QcqpError, Quadratic, SolveStatus, SolverOptions,
};

use crate::inverter::{InverterError, InverterSpec};
use crate::linflow::{
    line_losses, voltages_from_injections, FlowError, InjectionVector, Loads, VoltageProfile,
};
use crate::netmodel::{NetworkModel, SensitivityMatrices};

#[derive(Debug, thiserror::Error)]
pub enum DispatchError {
    #[error("cost coefficients: {0}")]
    InvalidCosts(String),
    #[error(transparent)]
    Inverter(#[from] InverterError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Solver(#[from] QcqpError),
    #[error("fairness term: household {household} has no available PV")]
    ZeroAvailable { household: usize },
    #[error("dispatch infeasible; binding constraints: {}", binding.join(", "))]
    Infeasible { binding: Vec<String> },
    #[error("solver stopped with status {status} after {iterations} iterations (worst KKT residual {residual:.3e})")]
    SolverFailed {
        status: SolveStatus,
        iterations: usize,
        residual: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub c_kappa: f64,
}

impl Default for CostCoefficients {
    fn default() -> Self {
        Self {
            a: 2.0,
            b: 0.05,
            c: 1.0,
            d: 0.025,
            c_kappa: 0.0,
        }
    }
}

impl CostCoefficients {
    pub fn with_c_kappa(self, c_kappa: f64) -> Self {
        Self { c_kappa, ..self }
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d), ("c_kappa", self.c_kappa)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DispatchError::InvalidCosts(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Oid,
    Foid,
}

/// Normalization of the mean curtailment share inside the fairness term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FairnessMean {
    /// `1 / (|H| + 1)`
    #[default]
    Padded,
    /// `1 / |H|`
    Exact,
}

impl FairnessMean {
    fn weight(self, households: usize) -> f64 {
        match self {
            FairnessMean::Padded => 1.0 / (households as f64 + 1.0),
            FairnessMean::Exact => 1.0 / households as f64,
        }
    }
}

/// Power unit the cost coefficients act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveUnits {
    #[default]
    Kilowatt,
    PerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DispatchOptions {
    pub fairness_mean: FairnessMean,
    pub units: ObjectiveUnits,
    pub solver: SolverOptions,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self {
            fairness_mean: FairnessMean::Padded,
            units: ObjectiveUnits::Kilowatt,
            solver: SolverOptions::default(),
        }
    }
}

/// `Σ_h (s_h − w Σ_l s_l)²` over curtailment shares `s_h = p_c / p_av`.
pub fn fairness_term(p_c: &[f64], p_av: &[f64], mean: FairnessMean) -> Result<f64, DispatchError> {
    if p_c.len() != p_av.len() {
        return Err(FlowError::Dimension {
            what: "fairness curtailment",
            expected: p_av.len(),
            got: p_c.len(),
        }
        .into());
    }
    if p_c.is_empty() {
        return Ok(0.0);
    }
    let mut shares = Vec::with_capacity(p_c.len());
    for (h, (c, a)) in p_c.iter().zip(p_av).enumerate() {
        if !(*a > 0.0) {
            return Err(DispatchError::ZeroAvailable { household: h + 1 });
        }
        shares.push(c / a);
    }
    let m = mean.weight(shares.len()) * shares.iter().sum::<f64>();
    Ok(shares.iter().map(|s| (s - m) * (s - m)).sum())
}

/// Where each household's variables sit in the decision vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchLayout {
    /// Household positions (0-based, fleet order) that carry variables.
    pub active: Vec<usize>,
    pub households: usize,
}

impl DispatchLayout {
    pub fn n(&self) -> usize {
        4 * self.active.len()
    }
    pub fn p_c(&self, k: usize) -> usize {
        4 * k
    }
    pub fn q_c(&self, k: usize) -> usize {
        4 * k + 1
    }
    pub fn q_plus(&self, k: usize) -> usize {
        4 * k + 2
    }
    pub fn q_minus(&self, k: usize) -> usize {
        4 * k + 3
    }
}

/// Bus voltages as affine functions of the decision vector, every bus.
struct AffineVoltages {
    re0: DVector<f64>,
    im0: DVector<f64>,
    re: DMatrix<f64>,
    im: DMatrix<f64>,
}

impl AffineVoltages {
    fn new(
        net: &NetworkModel,
        sens: &SensitivityMatrices,
        loads: &Loads,
        fleet: &[InverterSpec],
        layout: &DispatchLayout,
    ) -> Result<Self, DispatchError> {
        let p_out: Vec<f64> = fleet.iter().map(|s| s.p_av).collect();
        let zero = vec![0.0; fleet.len()];
        let base = InjectionVector::from_households(net, sens, loads, &p_out, &zero)?;
        let prof = voltages_from_injections(sens, &base, net.v_nom)?;
        let nb = net.buses.len();
        let mut re = DMatrix::zeros(nb, layout.n());
        let mut im = DMatrix::zeros(nb, layout.n());
        for (k, &h) in layout.active.iter().enumerate() {
            let col = sens.row_of(fleet[h].bus).expect("household is not slack");
            for (i, &b) in sens.buses.iter().enumerate() {
                let (r, x) = (sens.r[(i, col)], sens.x[(i, col)]);
                // p_net = p_av − p_c, q_net = q_c
                re[(b, layout.p_c(k))] = -r;
                re[(b, layout.q_c(k))] = x;
                im[(b, layout.p_c(k))] = -x;
                im[(b, layout.q_c(k))] = -r;
            }
        }
        Ok(Self {
            re0: prof.v_re,
            im0: prof.v_im,
            re,
            im,
        })
    }

    fn diff(&self, m: &DMatrix<f64>, a: usize, b: usize) -> DVector<f64> {
        (m.row(a) - m.row(b)).transpose()
    }
}

/// An assembled dispatch problem ready for the solver.
#[derive(Debug, Clone)]
pub struct AssembledDispatch {
    pub problem: ConvexQcqp,
    pub layout: DispatchLayout,
    /// Weight turning pu power into objective units.
    pub unit: f64,
    pub costs: CostCoefficients,
}

fn unit_vec(n: usize, entries: &[(usize, f64)]) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    for &(i, a) in entries {
        v[i] += a;
    }
    v
}

fn check_fleet(net: &NetworkModel, fleet: &[InverterSpec]) -> Result<(), DispatchError> {
    let hh = net.households();
    if hh.len() != fleet.len() {
        return Err(InverterError::FleetMismatch(format!("{} inverters for {} households", fleet.len(), hh.len())).into());
    }
    for (s, &b) in fleet.iter().zip(&hh) {
        if s.bus != b {
            return Err(InverterError::FleetMismatch(format!(
                "inverter bus {} where household bus {b} expected",
                s.bus
            ))
            .into());
        }
        s.validate()?;
    }
    Ok(())
}

pub fn assemble(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    loads: &Loads,
    fleet: &[InverterSpec],
    costs: &CostCoefficients,
    strategy: Strategy,
    opts: &DispatchOptions,
) -> Result<AssembledDispatch, DispatchError> {
    check_fleet(net, fleet)?;
    costs.validate()?;
    let costs = match strategy {
        Strategy::Oid => costs.with_c_kappa(0.0),
        Strategy::Foid => *costs,
    };
    let layout = DispatchLayout {
        active: (0..fleet.len()).filter(|&h| fleet[h].p_av > 0.0).collect(),
        households: fleet.len(),
    };
    let n = layout.n();
    let unit = match opts.units {
        ObjectiveUnits::Kilowatt => net.s_base,
        ObjectiveUnits::PerUnit => 1.0,
    };
    let volts = AffineVoltages::new(net, sens, loads, fleet, &layout)?;
    let pav: Vec<f64> = layout.active.iter().map(|&h| net.kw_to_pu(fleet[h].p_av)).collect();
    let srat: Vec<f64> = layout.active.iter().map(|&h| net.kw_to_pu(fleet[h].s_rating)).collect();

    // Objective: losses + inverter costs + fairness.
    let mut obj = Quadratic::zeros(n);
    for l in &net.lines {
        let g = net.line_y_pu(l).re;
        let dre = volts.diff(&volts.re, l.from, l.to);
        let dim = volts.diff(&volts.im, l.from, l.to);
        obj.add_squared_affine(unit * g, &dre, volts.re0[l.from] - volts.re0[l.to]);
        obj.add_squared_affine(unit * g, &dim, volts.im0[l.from] - volts.im0[l.to]);
    }
    for k in 0..layout.active.len() {
        obj.p[(layout.p_c(k), layout.p_c(k))] += 2.0 * costs.a * unit * unit;
        obj.q[layout.p_c(k)] += costs.b * unit;
        obj.p[(layout.q_c(k), layout.q_c(k))] += 2.0 * costs.c * unit * unit;
        obj.q[layout.q_plus(k)] += costs.d * unit;
        obj.q[layout.q_minus(k)] += costs.d * unit;
    }
    if costs.c_kappa > 0.0 && !layout.active.is_empty() {
        let w = opts.fairness_mean.weight(layout.active.len());
        let mean = unit_vec(
            n,
            &(0..layout.active.len()).map(|k| (layout.p_c(k), w / pav[k])).collect::<Vec<_>>(),
        );
        for k in 0..layout.active.len() {
            let g = unit_vec(n, &[(layout.p_c(k), 1.0 / pav[k])]) - &mean;
            obj.add_squared_affine(costs.c_kappa, &g, 0.0);
        }
    }

    let mut b = ConvexQcqp::builder(obj);
    let tan = |k: usize| fleet[layout.active[k]].tan_theta();
    for k in 0..layout.active.len() {
        let hn = layout.active[k] + 1;
        let (pc, qc, qp, qm) = (layout.p_c(k), layout.q_c(k), layout.q_plus(k), layout.q_minus(k));
        b.eq(unit_vec(n, &[(qc, 1.0), (qp, -1.0), (qm, 1.0)]), 0.0);
        b.le(unit_vec(n, &[(pc, -1.0)]), 0.0, format!("curtailment >= 0 at household {hn}"));
        b.le(unit_vec(n, &[(pc, 1.0)]), pav[k], format!("curtailment <= available at household {hn}"));
        b.le(unit_vec(n, &[(qp, -1.0)]), 0.0, format!("q+ >= 0 at household {hn}"));
        b.le(unit_vec(n, &[(qm, -1.0)]), 0.0, format!("q- >= 0 at household {hn}"));
        b.le(unit_vec(n, &[(qp, 1.0)]), srat[k], format!("q+ <= rating at household {hn}"));
        b.le(unit_vec(n, &[(qm, 1.0)]), srat[k], format!("q- <= rating at household {hn}"));
        b.le(
            unit_vec(n, &[(qc, 1.0), (pc, tan(k))]),
            tan(k) * pav[k],
            format!("power factor (absorbing) at household {hn}"),
        );
        b.le(
            unit_vec(n, &[(qc, -1.0), (pc, tan(k))]),
            tan(k) * pav[k],
            format!("power factor (injecting) at household {hn}"),
        );
        let w = 1.0 / (srat[k] * srat[k]);
        let mut ball = Quadratic::zeros(n);
        ball.add_squared_affine(w, &unit_vec(n, &[(pc, -1.0)]), pav[k]);
        ball.add_squared_affine(w, &unit_vec(n, &[(qc, 1.0)]), 0.0);
        ball.r -= 1.0;
        b.quad(ball, format!("apparent power at household {hn}"));
    }
    if n > 0 {
        for &bus in &net.non_slack() {
            let row = volts.re.row(bus).transpose();
            b.le(row.clone(), net.v_max - volts.re0[bus], format!("v_max at bus {bus}"));
            b.le(-row, volts.re0[bus] - net.v_min, format!("v_min at bus {bus}"));
        }
        for (li, l) in net.lines.iter().enumerate() {
            let Some(i_max) = l.i_max else { continue };
            let lim = i_max / net.i_base();
            let y2 = net.line_y_pu(l).norm_sqr();
            let w = y2 / (lim * lim);
            let mut f = Quadratic::zeros(n);
            f.add_squared_affine(w, &volts.diff(&volts.re, l.from, l.to), volts.re0[l.from] - volts.re0[l.to]);
            f.add_squared_affine(w, &volts.diff(&volts.im, l.from, l.to), volts.im0[l.from] - volts.im0[l.to]);
            f.r -= 1.0;
            b.quad(f, format!("ampacity of line {li} ({}-{})", l.from, l.to));
        }
        // Slack injection: P0 = Σ loads − Σ (p_av − p_c), Q0 = Σ q loads − Σ q_c.
        let st = net.kw_to_pu(net.transformer_s_max);
        let p0 = net.kw_to_pu(loads.total_p_kw()) - pav.iter().sum::<f64>();
        let q0 = net.kw_to_pu(loads.q_kvar.iter().sum::<f64>());
        let gp = unit_vec(n, &(0..layout.active.len()).map(|k| (layout.p_c(k), 1.0)).collect::<Vec<_>>());
        let gq = unit_vec(n, &(0..layout.active.len()).map(|k| (layout.q_c(k), -1.0)).collect::<Vec<_>>());
        let w = 1.0 / (st * st);
        let mut f = Quadratic::zeros(n);
        f.add_squared_affine(w, &gp, p0);
        f.add_squared_affine(w, &gq, q0);
        f.r -= 1.0;
        b.quad(f, "transformer rating");
    }
    let problem = b.build();
    let report = check_convexity(&problem);
    if let Some(bad) = report.failing().next() {
        return Err(QcqpError::NotConvex {
            block: bad.name.clone(),
            min_eigenvalue: bad.min_eigenvalue,
        }
        .into());
    }
    Ok(AssembledDispatch {
        problem,
        layout,
        unit,
        costs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// Line losses in objective units.
    pub rho: f64,
    pub phi: f64,
    /// Unweighted fairness term.
    pub kappa: f64,
    /// `rho + phi + c_kappa · kappa`
    pub total: f64,
}

/// Largest violation of the physical constraints at the reported setpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityAudit {
    pub max_violation: f64,
    pub worst: String,
}

impl FeasibilityAudit {
    fn new() -> Self {
        Self {
            max_violation: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: impl FnOnce() -> String, violation: f64) {
        if violation > self.max_violation {
            self.max_violation = violation;
            self.worst = what();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    /// Per household, kW.
    pub p_c: Vec<f64>,
    /// Per household, kVAr.
    pub q_c: Vec<f64>,
    pub profile: VoltageProfile,
    pub total_curtailment: f64,
    /// Post-hoc line losses of the solved profile, kW.
    pub line_losses: f64,
    pub terms: ObjectiveTerms,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub audit: FeasibilityAudit,
}

impl DispatchSolution {
    pub fn max_household_voltage(&self, net: &NetworkModel) -> f64 {
        net.households().iter().map(|&b| self.profile.v_re[b]).fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn solve_dispatch(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    loads: &Loads,
    fleet: &[InverterSpec],
    costs: &CostCoefficients,
    strategy: Strategy,
) -> Result<DispatchSolution, DispatchError> {
    solve_dispatch_with(net, sens, loads, fleet, costs, strategy, &DispatchOptions::default())
}

pub fn solve_dispatch_with(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    loads: &Loads,
    fleet: &[InverterSpec],
    costs: &CostCoefficients,
    strategy: Strategy,
    opts: &DispatchOptions,
) -> Result<DispatchSolution, DispatchError> {
    let asm = assemble(net, sens, loads, fleet, costs, strategy, opts)?;
    let sol = solve(&asm.problem, &opts.solver)?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(DispatchError::Infeasible { binding: binding(&asm.problem, &sol) }),
        status => {
            return Err(DispatchError::SolverFailed {
                status,
                iterations: sol.iterations,
                residual: sol.kkt.max(),
            })
        }
    }
    let mut p_c = vec![0.0; fleet.len()];
    let mut q_c = vec![0.0; fleet.len()];
    for (k, &h) in asm.layout.active.iter().enumerate() {
        p_c[h] = net.pu_to_kw(sol.x[asm.layout.p_c(k)]);
        q_c[h] = net.pu_to_kw(sol.x[asm.layout.q_c(k)]);
    }
    evaluate(net, sens, loads, fleet, &asm, p_c, q_c, sol.status, sol.kkt, sol.iterations, opts)
}

/// Labels of the constraints carrying the largest certificate weight,
/// measured as multiplier times constraint gradient norm.
fn binding(problem: &ConvexQcqp, sol: &foid_qcqp::SolverSolution) -> Vec<String> {
    let lin = sol.duals.ineq.iter().enumerate().map(|(i, d)| {
        (d.abs() * problem.ineq.a.row(i).norm(), problem.ineq_label(i))
    });
    let quad = sol.duals.quad.iter().enumerate().map(|(i, d)| {
        (d.abs() * problem.quad[i].gradient(&sol.x).norm(), problem.quad_label(i))
    });
    let mut w: Vec<(f64, String)> = lin.chain(quad).filter(|(d, _)| d.is_finite() && *d > 0.0).collect();
    w.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = w.first().map(|t| t.0).unwrap_or(0.0);
    w.into_iter()
        .take_while(|(d, _)| *d >= 1e-3 * top)
        .take(5)
        .map(|(_, l)| l)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    net: &NetworkModel,
    sens: &SensitivityMatrices,
    loads: &Loads,
    fleet: &[InverterSpec],
    asm: &AssembledDispatch,
    p_c: Vec<f64>,
    q_c: Vec<f64>,
    status: SolveStatus,
    kkt: KktResiduals,
    iterations: usize,
    opts: &DispatchOptions,
) -> Result<DispatchSolution, DispatchError> {
    let p_out: Vec<f64> = fleet.iter().zip(&p_c).map(|(s, c)| s.p_av - c).collect();
    let inj = InjectionVector::from_households(net, sens, loads, &p_out, &q_c)?;
    let profile = voltages_from_injections(sens, &inj, net.v_nom)?;
    let losses = line_losses(net, &profile);

    let u = asm.unit / net.s_base;
    let costs = &asm.costs;
    let phi: f64 = asm
        .layout
        .active
        .iter()
        .map(|&h| {
            let (pc, qc) = (p_c[h] * u, q_c[h] * u);
            costs.a * pc * pc + costs.b * pc + costs.c * qc * qc + costs.d * qc.abs()
        })
        .sum();
    let act_pc: Vec<f64> = asm.layout.active.iter().map(|&h| p_c[h]).collect();
    let act_av: Vec<f64> = asm.layout.active.iter().map(|&h| fleet[h].p_av).collect();
    let kappa = fairness_term(&act_pc, &act_av, opts.fairness_mean)?;
    let rho = losses * u;
    let terms = ObjectiveTerms {
        rho,
        phi,
        kappa,
        total: rho + phi + costs.c_kappa * kappa,
    };

    let mut audit = FeasibilityAudit::new();
    for &h in &asm.layout.active {
        let s = &fleet[h];
        let (pc, qc) = (p_c[h], q_c[h]);
        let out = s.p_av - pc;
        audit.record(|| format!("curtailment below zero at household {}", h + 1), -pc);
        audit.record(|| format!("curtailment above available at household {}", h + 1), -out);
        audit.record(
            || format!("apparent power at household {}", h + 1),
            out.hypot(qc) - s.s_rating,
        );
        audit.record(
            || format!("power factor at household {}", h + 1),
            qc.abs() - s.tan_theta() * out,
        );
    }
    for &b in &net.non_slack() {
        audit.record(|| format!("v_max at bus {b}"), profile.v_re[b] - net.v_max);
        audit.record(|| format!("v_min at bus {b}"), net.v_min - profile.v_re[b]);
    }
    for (li, l) in net.lines.iter().enumerate() {
        if let Some(i_max) = l.i_max {
            let dre = profile.v_re[l.from] - profile.v_re[l.to];
            let dim = profile.v_im[l.from] - profile.v_im[l.to];
            let amps = net.line_y_pu(l).norm() * dre.hypot(dim) * net.i_base();
            audit.record(|| format!("ampacity of line {li}"), amps - i_max);
        }
    }
    let p0 = loads.total_p_kw() - p_out.iter().sum::<f64>();
    let q0 = loads.q_kvar.iter().sum::<f64>() - q_c.iter().sum::<f64>();
    audit.record(|| "transformer rating".to_string(), p0.hypot(q0) - net.transformer_s_max);

    Ok(DispatchSolution {
        total_curtailment: p_c.iter().sum(),
        p_c,
        q_c,
        profile,
        line_losses: losses,
        terms,
        status,
        kkt,
        iterations,
        audit,
    })
}
