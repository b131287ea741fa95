//! Feeder topology, per-unit bases, admittance matrix and voltage sensitivities.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

pub type C64 = Complex<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("line {index} ({from}-{to}) has zero impedance")]
    ZeroImpedance { index: usize, from: usize, to: usize },
    #[error("reduced admittance matrix is singular")]
    Singular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pole,
    Household,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// kW
    #[serde(default)]
    pub load_p: f64,
    /// kVAr
    #[serde(default)]
    pub load_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// km
    pub length: f64,
    /// Ω/km
    pub r_per_km: f64,
    /// mH/km
    pub l_per_km: f64,
    /// µF/km
    #[serde(default)]
    pub c_per_km: f64,
    /// Ampacity in A; `None` leaves the line unconstrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    /// kVA, three-phase
    pub s_base: f64,
    /// V, phase-to-neutral
    pub v_base: f64,
    /// Hz
    #[serde(default = "default_frequency")]
    pub frequency: f64,
}

fn default_frequency() -> f64 {
    50.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub v_nom: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transformer {
    /// kVA
    pub s_max: f64,
}

/// On-disk layout of a network file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default)]
    version: Option<u32>,
    #[serde(default)]
    shunts: bool,
    bases: Bases,
    limits: Limits,
    transformer: Transformer,
    buses: Vec<Bus>,
    lines: Vec<Line>,
}

/// A validated feeder. Buses are stored in id order, so a bus id is also its
/// index into every per-bus vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    /// kVA
    pub transformer_s_max: f64,
    pub v_nom: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub frequency: f64,
    /// kVA, three-phase
    pub s_base: f64,
    /// V, phase-to-neutral
    pub v_base: f64,
    /// Include π-model line charging at each line end.
    pub shunts: bool,
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkModel, NetworkError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    NetworkModel::from_toml_str(&text, &path.display().to_string())
}

impl NetworkModel {
    /// Parses and validates a network description. `origin` is used in error
    /// messages only.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, NetworkError> {
        let file: NetworkFile = toml::from_str(text).map_err(|e| NetworkError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        if let Some(v) = file.version {
            if v != 1 {
                return Err(NetworkError::Invalid(format!("unsupported file version {v}")));
            }
        }
        let mut buses = file.buses;
        buses.sort_by_key(|b| b.id);
        let net = NetworkModel {
            buses,
            lines: file.lines,
            transformer_s_max: file.transformer.s_max,
            v_nom: file.limits.v_nom,
            v_min: file.limits.v_min,
            v_max: file.limits.v_max,
            frequency: file.bases.frequency,
            s_base: file.bases.s_base,
            v_base: file.bases.v_base,
            shunts: file.shunts,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::Invalid(m));
        let n = self.buses.len();
        if n < 2 {
            return bad("need at least two buses".into());
        }
        for (i, b) in self.buses.iter().enumerate() {
            if b.id != i {
                return bad(format!("bus ids must be 0..{} without gaps; found id {}", n - 1, b.id));
            }
            if !(b.load_p.is_finite() && b.load_q.is_finite()) {
                return bad(format!("bus {i}: non-finite load"));
            }
            match b.kind {
                BusKind::Household if b.load_p < 0.0 => {
                    return bad(format!("bus {i}: household load_p must be >= 0"))
                }
                BusKind::Pole if b.load_p != 0.0 || b.load_q != 0.0 => {
                    return bad(format!("bus {i}: pole buses carry no load"))
                }
                _ => {}
            }
        }
        let slacks = self.buses.iter().filter(|b| b.kind == BusKind::Slack).count();
        if slacks != 1 {
            return bad(format!("exactly one slack bus required, found {slacks}"));
        }
        if !(self.v_min < self.v_nom && self.v_nom < self.v_max) {
            return bad(format!(
                "voltage limits must satisfy v_min < v_nom < v_max (got {}, {}, {})",
                self.v_min, self.v_nom, self.v_max
            ));
        }
        if !(self.transformer_s_max > 0.0) {
            return bad("transformer s_max must be > 0".into());
        }
        if !(self.s_base > 0.0 && self.v_base > 0.0 && self.frequency > 0.0) {
            return bad("s_base, v_base and frequency must be > 0".into());
        }
        for (k, l) in self.lines.iter().enumerate() {
            if l.from >= n || l.to >= n {
                return bad(format!("line {k}: unknown bus ({} -> {})", l.from, l.to));
            }
            if l.from == l.to {
                return bad(format!("line {k}: from == to ({})", l.from));
            }
            if !(l.length > 0.0) {
                return bad(format!("line {k}: length must be > 0"));
            }
            if !(l.r_per_km > 0.0) {
                return bad(format!("line {k}: r_per_km must be > 0"));
            }
            if l.l_per_km < 0.0 || l.c_per_km < 0.0 {
                return bad(format!("line {k}: negative l_per_km or c_per_km"));
            }
            if let Some(i) = l.i_max {
                if !(i > 0.0) {
                    return bad(format!("line {k}: i_max must be > 0"));
                }
            }
        }
        // connectivity from the slack
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            adj[l.from].push(l.to);
            adj[l.to].push(l.from);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.slack()]);
        seen[self.slack()] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        if let Some(b) = seen.iter().position(|s| !s) {
            return bad(format!("bus {b} is not connected to the slack bus"));
        }
        Ok(())
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated network has a slack bus")
    }

    /// Household bus indices in id order; household `h` (0-based) is
    /// `households()[h]`.
    pub fn households(&self) -> Vec<usize> {
        self.buses
            .iter()
            .filter(|b| b.kind == BusKind::Household)
            .map(|b| b.id)
            .collect()
    }

    /// All buses except the slack, in id order. This is the row order of
    /// [`SensitivityMatrices`].
    pub fn non_slack(&self) -> Vec<usize> {
        let s = self.slack();
        (0..self.buses.len()).filter(|&i| i != s).collect()
    }

    /// Ω
    pub fn z_base(&self) -> f64 {
        3.0 * self.v_base * self.v_base / (self.s_base * 1e3)
    }

    /// A
    pub fn i_base(&self) -> f64 {
        self.s_base * 1e3 / (3.0 * self.v_base)
    }

    pub fn kw_to_pu(&self, kw: f64) -> f64 {
        kw / self.s_base
    }

    pub fn pu_to_kw(&self, pu: f64) -> f64 {
        pu * self.s_base
    }

    /// Series impedance of a line in pu.
    pub fn line_z_pu(&self, line: &Line) -> C64 {
        line_impedance(line, self.frequency) / self.z_base()
    }

    /// Series admittance of a line in pu.
    pub fn line_y_pu(&self, line: &Line) -> C64 {
        C64::new(1.0, 0.0) / self.line_z_pu(line)
    }

    /// Half of the line charging admittance (pu), placed at each end.
    pub fn line_half_shunt_pu(&self, line: &Line) -> C64 {
        let b = 2.0 * PI * self.frequency * line.c_per_km * 1e-6 * line.length;
        C64::new(0.0, 0.5 * b * self.z_base())
    }

    /// Total household load in kW.
    pub fn total_load_kw(&self) -> f64 {
        self.buses.iter().map(|b| b.load_p).sum()
    }
}

/// Series impedance `(r + j·2πf·l)·length` in Ω.
pub fn line_impedance(line: &Line, frequency: f64) -> C64 {
    let x_per_km = 2.0 * PI * frequency * line.l_per_km * 1e-3;
    C64::new(line.r_per_km * line.length, x_per_km * line.length)
}

/// Bus admittance matrix in pu.
pub fn build_ybus(net: &NetworkModel) -> Result<DMatrix<C64>, NetworkError> {
    let n = net.buses.len();
    let mut y = DMatrix::from_element(n, n, C64::new(0.0, 0.0));
    for (k, l) in net.lines.iter().enumerate() {
        let z = net.line_z_pu(l);
        if z.norm() < 1e-12 {
            return Err(NetworkError::ZeroImpedance {
                index: k,
                from: l.from,
                to: l.to,
            });
        }
        let ys = C64::new(1.0, 0.0) / z;
        let (a, b) = (l.from, l.to);
        y[(a, a)] += ys;
        y[(b, b)] += ys;
        y[(a, b)] -= ys;
        y[(b, a)] -= ys;
        if net.shunts {
            let sh = net.line_half_shunt_pu(l);
            y[(a, a)] += sh;
            y[(b, b)] += sh;
        }
    }
    Ok(y)
}

/// Real and imaginary parts of the inverse of the slack-reduced admittance
/// matrix. Rows and columns follow `buses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub slack: usize,
    /// Bus index of each row.
    pub buses: Vec<usize>,
}

impl SensitivityMatrices {
    pub fn dim(&self) -> usize {
        self.buses.len()
    }

    /// Row of a bus, or `None` for the slack.
    pub fn row_of(&self, bus: usize) -> Option<usize> {
        self.buses.iter().position(|&b| b == bus)
    }

    /// Complex `Z = R + jX`.
    pub fn z(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.dim(), self.dim(), |i, j| C64::new(self.r[(i, j)], self.x[(i, j)]))
    }
}

/// Drops the slack row and column, then inverts.
pub fn reduced_ybus(ybus: &DMatrix<C64>, slack: usize) -> (DMatrix<C64>, Vec<usize>) {
    let n = ybus.nrows();
    let keep: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let m = keep.len();
    let red = DMatrix::from_fn(m, m, |i, j| ybus[(keep[i], keep[j])]);
    (red, keep)
}

pub fn sensitivity_matrices(ybus: &DMatrix<C64>, slack: usize) -> Result<SensitivityMatrices, NetworkError> {
    let (red, keep) = reduced_ybus(ybus, slack);
    let z = red.try_inverse().ok_or(NetworkError::Singular)?;
    if z.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(NetworkError::Singular);
    }
    Ok(SensitivityMatrices {
        r: z.map(|v| v.re),
        x: z.map(|v| v.im),
        slack,
        buses: keep,
    })
}

/// Convenience: Y-bus and sensitivities for a validated network.
pub fn sensitivities(net: &NetworkModel) -> Result<SensitivityMatrices, NetworkError> {
    sensitivity_matrices(&build_ybus(net)?, net.slack())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pole_line() -> Line {
        Line {
            from: 0,
            to: 1,
            length: 0.075,
            r_per_km: 0.549,
            l_per_km: 0.230,
            c_per_km: 0.055,
            i_max: None,
        }
    }

    #[test]
    fn impedance_of_table_lines() {
        let z = line_impedance(&pole_line(), 50.0);
        assert!((z.re - 0.041175).abs() < 1e-12);
        assert!((z.im - 0.075 * 2.0 * PI * 50.0 * 0.230e-3).abs() < 1e-15);
        assert!((z.im - 0.00542).abs() < 5e-6);
        let drop = Line {
            length: 0.025,
            r_per_km: 0.270,
            l_per_km: 0.240,
            ..pole_line()
        };
        let z = line_impedance(&drop, 50.0);
        assert!((z.re - 0.00675).abs() < 1e-12);
        assert!((z.im - 0.00188).abs() < 5e-6);
    }
}
