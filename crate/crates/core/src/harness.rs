//! Case study, scenario sweep, metrics and export.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acflow::{linearization_error_with, AcSolver};
use crate::dispatch::{
    solve_dispatch_with, CostCoefficients, DispatchOptions, DispatchSolution, FairnessMean, ObjectiveUnits, Strategy,
};
use crate::inverter::{droop_equilibrium, DroopResult, InverterSpec};
use crate::linflow::{line_losses, InjectionVector, Loads};
use crate::netmodel::{sensitivities, NetworkError, NetworkModel, SensitivityMatrices};

pub const BUILTIN_NETWORK: &str = include_str!("../data/feeder18.toml");

/// Shares at or above `1 − FULL_CURTAIL_TOL / p_av` count as fully curtailed.
pub const FULL_CURTAIL_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Export { path: String, message: String },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetTemplate {
    /// `s_rating = s_factor · p_av`
    pub s_factor: f64,
    pub pf_min: f64,
    pub eta: f64,
}

impl Default for FleetTemplate {
    fn default() -> Self {
        Self {
            s_factor: 1.1,
            pf_min: 0.85,
            eta: 1.0,
        }
    }
}

impl FleetTemplate {
    pub fn uniform(&self, net: &NetworkModel, pv_kw: f64) -> Vec<InverterSpec> {
        net.households()
            .into_iter()
            .map(|bus| InverterSpec {
                bus,
                p_av: pv_kw,
                s_rating: self.s_factor * pv_kw,
                pf_min: self.pf_min,
                eta: self.eta,
            })
            .collect()
    }
}

/// A network with its loads, sensitivities and inverter template.
#[derive(Debug, Clone)]
pub struct Case {
    pub net: NetworkModel,
    pub sens: SensitivityMatrices,
    pub loads: Loads,
    pub template: FleetTemplate,
    /// Load the PV:load ratio is quoted against, kW.
    pub reference_load_kw: f64,
}

impl Case {
    pub fn new(net: NetworkModel, template: FleetTemplate) -> Result<Self, NetworkError> {
        let sens = sensitivities(&net)?;
        let loads = Loads::from_network(&net);
        Ok(Self {
            reference_load_kw: loads.total_p_kw(),
            net,
            sens,
            loads,
            template,
        })
    }

    pub fn fleet(&self, pv_kw: f64) -> Vec<InverterSpec> {
        self.template.uniform(&self.net, pv_kw)
    }

    /// Total available PV over the reference load.
    pub fn ratio(&self, pv_kw: f64) -> f64 {
        pv_kw * self.net.households().len() as f64 / self.reference_load_kw
    }

    /// Per-household PV giving the requested PV:load ratio.
    pub fn pv_for_ratio(&self, ratio: f64) -> f64 {
        ratio * self.reference_load_kw / self.net.households().len() as f64
    }
}

/// Quoted total of the built-in household loads. The individual loads sum
/// to 17.02 kW; ratios are expressed against the quoted figure.
pub const BUILTIN_REFERENCE_LOAD_KW: f64 = 17.04;

pub fn builtin_case() -> Case {
    let net = NetworkModel::from_toml_str(BUILTIN_NETWORK, "builtin feeder18.toml").expect("builtin network is valid");
    Case {
        reference_load_kw: BUILTIN_REFERENCE_LOAD_KW,
        ..Case::new(net, FleetTemplate::default()).expect("builtin network is nonsingular")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(alias = "oid")]
    #[serde(rename = "OID")]
    Oid,
    #[serde(alias = "voltvar", alias = "volt_var")]
    #[serde(rename = "VoltVAr")]
    VoltVar,
    #[serde(alias = "foid")]
    #[serde(rename = "FOID")]
    Foid,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Oid => "OID",
            StrategyKind::VoltVar => "VoltVAr",
            StrategyKind::Foid => "FOID",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "oid" => Ok(Self::Oid),
            "voltvar" | "volt_var" | "droop" => Ok(Self::VoltVar),
            "foid" => Ok(Self::Foid),
            _ => Err(format!("unknown strategy `{s}` (oid, voltvar, foid)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(format!("unknown format `{s}` (csv, json)")),
        }
    }
}

impl OutputFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRange {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl SweepRange {
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        (0..=count).map(|i| self.start + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Network file; relative paths resolve against the config file. `None`
    /// selects the built-in feeder.
    pub network: Option<PathBuf>,
    pub strategies: Vec<StrategyKind>,
    pub c_kappa: Vec<f64>,
    pub sweep: SweepRange,
    /// Extra PV:load ratios solved outside the regular sweep.
    pub extended_ratios: Vec<f64>,
    pub costs: CostCoefficients,
    pub fleet: FleetTemplate,
    /// Denominator of the PV:load ratio, kW. Defaults to the quoted total for
    /// the built-in feeder and to the summed loads otherwise.
    pub reference_load_kw: Option<f64>,
    pub fairness_mean: FairnessMean,
    pub units: ObjectiveUnits,
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    /// 0 lets the pool pick.
    pub workers: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            network: None,
            strategies: vec![StrategyKind::Oid, StrategyKind::VoltVar, StrategyKind::Foid],
            c_kappa: vec![0.01, 0.05, 0.1],
            sweep: SweepRange {
                start: 0.0,
                stop: 12.0,
                step: 0.8,
            },
            extended_ratios: vec![6.1, 8.2, 10.4],
            costs: CostCoefficients::default(),
            fleet: FleetTemplate::default(),
            reference_load_kw: None,
            fairness_mean: FairnessMean::Padded,
            units: ObjectiveUnits::Kilowatt,
            out_dir: PathBuf::from("results"),
            format: OutputFormat::Csv,
            workers: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if let (Some(net), Some(dir)) = (&cfg.network, path.parent()) {
            if net.is_relative() {
                cfg.network = Some(dir.join(net));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let r = &self.sweep;
        if !(r.step > 0.0) {
            return Err(HarnessError::Invalid("sweep.step must be > 0".into()));
        }
        if !(r.stop >= r.start && r.start >= 0.0) {
            return Err(HarnessError::Invalid("sweep needs 0 <= start <= stop".into()));
        }
        if self.strategies.is_empty() {
            return Err(HarnessError::Invalid("strategies must not be empty".into()));
        }
        if self.strategies.contains(&StrategyKind::Foid) && self.c_kappa.is_empty() {
            return Err(HarnessError::Invalid("FOID requested without any c_kappa".into()));
        }
        if self.c_kappa.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(HarnessError::Invalid("c_kappa values must be finite and >= 0".into()));
        }
        if let Some(r) = self.reference_load_kw {
            if !(r.is_finite() && r > 0.0) {
                return Err(HarnessError::Invalid("reference_load_kw must be > 0".into()));
            }
        }
        if self.extended_ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(HarnessError::Invalid("extended_ratios must be finite and >= 0".into()));
        }
        self.costs
            .validate()
            .map_err(|e| HarnessError::Invalid(e.to_string()))
    }

    pub fn case(&self) -> Result<Case, HarnessError> {
        let mut case = match &self.network {
            Some(p) => Case::new(crate::netmodel::load_network(p)?, self.fleet)?,
            None => Case {
                template: self.fleet,
                ..builtin_case()
            },
        };
        if let Some(r) = self.reference_load_kw {
            case.reference_load_kw = r;
        }
        Ok(case)
    }

    /// `(strategy, c_kappa)` pairs in row order.
    pub fn runs(&self) -> Vec<(StrategyKind, f64)> {
        let mut out = Vec::new();
        for &s in &self.strategies {
            match s {
                StrategyKind::Foid => out.extend(self.c_kappa.iter().map(|&c| (s, c))),
                _ => out.push((s, 0.0)),
            }
        }
        out
    }

    fn dispatch_options(&self) -> DispatchOptions {
        DispatchOptions {
            fairness_mean: self.fairness_mean,
            units: self.units,
            ..DispatchOptions::default()
        }
    }
}

mod nan_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Option<f64>>::deserialize(d)?
                .into_iter()
                .map(|x| x.unwrap_or(f64::NAN))
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario_kw: f64,
    pub ratio: f64,
    pub strategy: StrategyKind,
    pub ck: f64,
    #[serde(with = "nan_null")]
    pub total_curtailment_kw: f64,
    #[serde(with = "nan_null")]
    pub losses_kw: f64,
    #[serde(with = "nan_null")]
    pub max_v_pu: f64,
    #[serde(with = "nan_null")]
    pub fairness_variance: f64,
    #[serde(with = "nan_null::vec")]
    pub pc: Vec<f64>,
    #[serde(with = "nan_null::vec")]
    pub qc: Vec<f64>,
    pub status: String,
}

/// Full result of one row, before reduction to a [`SweepRow`].
#[derive(Debug, Clone)]
pub enum Outcome {
    Dispatch(Box<DispatchSolution>),
    Droop(Box<DroopResult>),
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct DetailedRow {
    pub row: SweepRow,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub variance: f64,
    pub max_share: f64,
    pub full_curtailed: usize,
}

/// Share statistics over the households with available PV.
pub fn fairness_metrics(row: &SweepRow, p_av: &[f64]) -> FairnessMetrics {
    fairness_metrics_with(&row.pc, p_av, FairnessMean::Padded)
}

pub fn fairness_metrics_with(pc: &[f64], p_av: &[f64], mean: FairnessMean) -> FairnessMetrics {
    let (mut c, mut a) = (Vec::new(), Vec::new());
    for (&x, &y) in pc.iter().zip(p_av) {
        if y > 0.0 {
            c.push(x);
            a.push(y);
        }
    }
    let variance = crate::dispatch::fairness_term(&c, &a, mean).unwrap_or(f64::NAN);
    FairnessMetrics {
        variance,
        max_share: c.iter().zip(&a).map(|(x, y)| x / y).fold(0.0, f64::max),
        full_curtailed: c.iter().zip(&a).filter(|(x, y)| **x >= **y - FULL_CURTAIL_TOL).count(),
    }
}

fn household_max_v(case: &Case, v_re: &nalgebra::DVector<f64>) -> f64 {
    case.net
        .households()
        .iter()
        .map(|&b| v_re[b])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves one `(pv, strategy, c_kappa)` combination.
pub fn run_one(case: &Case, cfg: &ScenarioConfig, pv_kw: f64, strategy: StrategyKind, ck: f64) -> DetailedRow {
    let fleet = case.fleet(pv_kw);
    let p_av: Vec<f64> = fleet.iter().map(|s| s.p_av).collect();
    let h = fleet.len();
    let mut row = SweepRow {
        scenario_kw: pv_kw,
        ratio: case.ratio(pv_kw),
        strategy,
        ck,
        total_curtailment_kw: f64::NAN,
        losses_kw: f64::NAN,
        max_v_pu: f64::NAN,
        fairness_variance: f64::NAN,
        pc: vec![f64::NAN; h],
        qc: vec![f64::NAN; h],
        status: String::new(),
    };
    let outcome = match strategy {
        StrategyKind::VoltVar => match droop_equilibrium(&case.net, &case.sens, &case.loads, &fleet) {
            Ok(d) => {
                row.status = if d.converged {
                    "converged".to_string()
                } else {
                    format!("not_converged: {}", d.diagnostics.join("; "))
                };
                row.total_curtailment_kw = d.total_curtailment();
                row.losses_kw = line_losses(&case.net, &d.profile);
                row.max_v_pu = household_max_v(case, &d.profile.v_re);
                row.pc = d.p_c.clone();
                row.qc = d.q_c.clone();
                Outcome::Droop(Box::new(d))
            }
            Err(e) => Outcome::Failed(e.to_string()),
        },
        StrategyKind::Oid | StrategyKind::Foid => {
            let (kind, costs) = match strategy {
                StrategyKind::Oid => (Strategy::Oid, cfg.costs.with_c_kappa(0.0)),
                _ => (Strategy::Foid, cfg.costs.with_c_kappa(ck)),
            };
            match solve_dispatch_with(
                &case.net,
                &case.sens,
                &case.loads,
                &fleet,
                &costs,
                kind,
                &cfg.dispatch_options(),
            ) {
                Ok(s) => {
                    row.status = s.status.as_str().to_string();
                    row.total_curtailment_kw = s.total_curtailment;
                    row.losses_kw = s.line_losses;
                    row.max_v_pu = household_max_v(case, &s.profile.v_re);
                    row.pc = s.p_c.clone();
                    row.qc = s.q_c.clone();
                    Outcome::Dispatch(Box::new(s))
                }
                Err(e) => Outcome::Failed(e.to_string()),
            }
        }
    };
    if let Outcome::Failed(msg) = &outcome {
        row.status = format!("error: {msg}");
    } else {
        row.fairness_variance = fairness_metrics_with(&row.pc, &p_av, cfg.fairness_mean).variance;
    }
    DetailedRow { row, outcome }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))
}

/// Every configured run at each listed PV level, in deterministic order.
pub fn run_points(case: &Case, cfg: &ScenarioConfig, pvs: &[f64]) -> Result<Vec<DetailedRow>, HarnessError> {
    cfg.validate()?;
    let runs = cfg.runs();
    let jobs: Vec<(f64, StrategyKind, f64)> = pvs
        .iter()
        .flat_map(|&pv| runs.iter().map(move |&(s, c)| (pv, s, c)))
        .collect();
    Ok(pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(pv, s, c)| run_one(case, cfg, pv, s, c))
            .collect()
    }))
}

pub fn run_sweep_detailed(cfg: &ScenarioConfig) -> Result<(Case, Vec<DetailedRow>), HarnessError> {
    let case = cfg.case()?;
    let rows = run_points(&case, cfg, &cfg.sweep.points())?;
    Ok((case, rows))
}

pub fn run_sweep(cfg: &ScenarioConfig) -> Result<Vec<SweepRow>, HarnessError> {
    Ok(run_sweep_detailed(cfg)?.1.into_iter().map(|d| d.row).collect())
}

/// Rows at the extended PV:load ratios.
pub fn run_extended(cfg: &ScenarioConfig) -> Result<Vec<SweepRow>, HarnessError> {
    let case = cfg.case()?;
    let pvs: Vec<f64> = cfg.extended_ratios.iter().map(|&r| case.pv_for_ratio(r)).collect();
    Ok(run_points(&case, cfg, &pvs)?.into_iter().map(|d| d.row).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub scenario_kw: f64,
    pub ratio: f64,
    /// Largest `| |V_lin| − |V_ac| |`, pu.
    pub max_error_pu: f64,
    /// Largest `| Re V_lin − |V_ac| |`, pu.
    pub max_bound_error_pu: f64,
    pub max_v_ac_pu: f64,
}

/// Linearization error against the AC oracle at uncurtailed output, `q = 0`.
pub fn validation_report(case: &Case, pvs: &[f64]) -> anyhow::Result<Vec<ValidationRow>> {
    let solver = AcSolver::new(&case.net)?;
    pvs.iter()
        .map(|&pv| {
            let fleet = case.fleet(pv);
            let p: Vec<f64> = fleet.iter().map(|s| s.p_av).collect();
            let q = vec![0.0; p.len()];
            let inj = InjectionVector::from_households(&case.net, &case.sens, &case.loads, &p, &q)?;
            let err = linearization_error_with(&solver, &case.net, &case.sens, &inj)?;
            let ac = solver.solve(&inj, &Default::default())?;
            Ok(ValidationRow {
                scenario_kw: pv,
                ratio: case.ratio(pv),
                max_error_pu: err.max_abs,
                max_bound_error_pu: err.max_abs_bound,
                max_v_ac_pu: ac.profile.magnitudes().into_iter().fold(0.0, f64::max),
            })
        })
        .collect()
}

/// Rounds to six significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

impl SweepRow {
    pub fn rounded(&self) -> Self {
        Self {
            scenario_kw: sig6(self.scenario_kw),
            ratio: sig6(self.ratio),
            ck: sig6(self.ck),
            total_curtailment_kw: sig6(self.total_curtailment_kw),
            losses_kw: sig6(self.losses_kw),
            max_v_pu: sig6(self.max_v_pu),
            fairness_variance: sig6(self.fairness_variance),
            pc: self.pc.iter().map(|&v| sig6(v)).collect(),
            qc: self.qc.iter().map(|&v| sig6(v)).collect(),
            ..self.clone()
        }
    }
}

pub fn csv_header(households: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "scenario_kw",
        "ratio",
        "strategy",
        "ck",
        "total_curtailment_kw",
        "losses_kw",
        "max_v_pu",
        "fairness_variance",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=households).map(|i| format!("pc_{i}")));
    h.extend((1..=households).map(|i| format!("qc_{i}")));
    h.push("status".into());
    h
}

fn num(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        sig6(v).to_string()
    }
}

pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], households: usize, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(households))?;
    for r in rows {
        let mut rec = vec![
            num(r.scenario_kw),
            num(r.ratio),
            r.strategy.to_string(),
            num(r.ck),
            num(r.total_curtailment_kw),
            num(r.losses_kw),
            num(r.max_v_pu),
            num(r.fairness_variance),
        ];
        rec.extend(r.pc.iter().map(|&v| num(v)));
        rec.extend(r.qc.iter().map(|&v| num(v)));
        rec.push(r.status.clone());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_json(rows: &[SweepRow]) -> Result<String, serde_json::Error> {
    let rounded: Vec<SweepRow> = rows.iter().map(SweepRow::rounded).collect();
    serde_json::to_string_pretty(&rounded)
}

pub fn from_json(text: &str) -> Result<Vec<SweepRow>, serde_json::Error> {
    serde_json::from_str(text)
}

/// Writes `rows` to `path` in `format`, creating parent directories.
pub fn export(rows: &[SweepRow], households: usize, format: OutputFormat, path: &Path) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let file = std::fs::File::create(path).map_err(io)?;
    let fail = |message: String| HarnessError::Export {
        path: path.display().to_string(),
        message,
    };
    match format {
        OutputFormat::Csv => write_csv(rows, households, std::io::BufWriter::new(file)).map_err(|e| fail(e.to_string())),
        OutputFormat::Json => {
            let text = to_json(rows).map_err(|e| fail(e.to_string()))?;
            use std::io::Write;
            let mut f = std::io::BufWriter::new(file);
            f.write_all(text.as_bytes())
                .and_then(|_| f.write_all(b"\n"))
                .and_then(|_| f.flush())
                .map_err(io)
        }
    }
}
