//! Product cone `R₊ˡ × Q^{m₁} × … × Q^{mₖ}` and its Nesterov-Todd scaling.
//!
//! Second-order cone blocks are `Q = { (u₀, u₁) : u₀ >= ‖u₁‖ }`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Cones {
    pub nonneg: usize,
    pub soc: Vec<usize>,
}

impl Cones {
    pub fn dim(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>()
    }

    /// Barrier degree: one per nonnegative row plus one per SOC block.
    pub fn degree(&self) -> usize {
        self.nonneg + self.soc.len()
    }

    pub fn soc_ranges(&self) -> Vec<Range<usize>> {
        let mut start = self.nonneg;
        self.soc
            .iter()
            .map(|&m| {
                let r = start..start + m;
                start += m;
                r
            })
            .collect()
    }

    pub fn identity(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.dim());
        e.rows_mut(0, self.nonneg).fill(1.0);
        for r in self.soc_ranges() {
            e[r.start] = 1.0;
        }
        e
    }

    /// Jordan product `u ∘ v`.
    pub fn product(&self, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for i in 0..self.nonneg {
            out[i] = u[i] * v[i];
        }
        for r in self.soc_ranges() {
            let (u0, v0) = (u[r.start], v[r.start]);
            out[r.start] = u.rows_range(r.clone()).dot(&v.rows_range(r.clone()));
            for i in r.start + 1..r.end {
                out[i] = u0 * v[i] + v0 * u[i];
            }
        }
        out
    }

    /// Solves `λ ∘ x = u` for `x`, with `λ` in the interior.
    pub fn inv_product(&self, lambda: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for i in 0..self.nonneg {
            out[i] = u[i] / lambda[i];
        }
        for r in self.soc_ranges() {
            let l0 = lambda[r.start];
            let l1 = lambda.rows_range(r.start + 1..r.end);
            let u1 = u.rows_range(r.start + 1..r.end);
            let det = l0 * l0 - l1.norm_squared();
            let x0 = (l0 * u[r.start] - l1.dot(&u1)) / det;
            out[r.start] = x0;
            for (k, i) in (r.start + 1..r.end).enumerate() {
                out[i] = (u1[k] - x0 * l1[k]) / l0;
            }
        }
        out
    }

    /// Smallest "eigenvalue" over all blocks; positive iff `x` is interior.
    pub fn min_eig(&self, x: &DVector<f64>) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.nonneg {
            m = m.min(x[i]);
        }
        for r in self.soc_ranges() {
            m = m.min(x[r.start] - x.rows_range(r.start + 1..r.end).norm());
        }
        m
    }

    /// Shifts `x` along the identity until it is safely interior.
    pub fn push_inside(&self, x: &mut DVector<f64>) {
        if self.dim() == 0 {
            return;
        }
        let t = -self.min_eig(x);
        if t >= -1e-8 * x.amax().max(1.0) {
            *x += self.identity() * (1.0 + t);
        }
    }

    /// Largest `α >= 0` keeping `x + α dx` in the cone (`+∞` if unbounded).
    pub fn max_step(&self, x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
        let mut alpha = f64::INFINITY;
        for i in 0..self.nonneg {
            if dx[i] < 0.0 {
                alpha = alpha.min(-x[i] / dx[i]);
            }
        }
        for r in self.soc_ranges() {
            alpha = alpha.min(soc_step(
                x.rows_range(r.clone()).as_slice(),
                dx.rows_range(r.clone()).as_slice(),
            ));
        }
        alpha
    }
}

fn soc_step(x: &[f64], d: &[f64]) -> f64 {
    let (x0, d0) = (x[0], d[0]);
    let x1 = &x[1..];
    let d1 = &d[1..];
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    // f(α) = a α² + 2 b α + c is the Lorentz "determinant" along the ray
    let a = d0 * d0 - dot(d1, d1);
    let b = x0 * d0 - dot(x1, d1);
    let c = x0 * x0 - dot(x1, x1);
    let mut best = if d0 < 0.0 { -x0 / d0 } else { f64::INFINITY };
    if a.abs() < 1e-300 {
        if b < 0.0 {
            best = best.min(-c / (2.0 * b));
        }
        return best;
    }
    let disc = b * b - a * c;
    if disc < 0.0 {
        return best;
    }
    let sq = disc.sqrt();
    let q = -(b + b.signum() * sq);
    let mut roots = [f64::INFINITY; 2];
    if q != 0.0 {
        roots[0] = q / a;
        roots[1] = c / q;
    } else {
        roots[0] = -b / a;
    }
    for r in roots {
        if r > 0.0 {
            best = best.min(r);
        }
    }
    best
}

/// One SOC block of the scaling, `W = β H(w̄)`.
#[derive(Debug, Clone)]
struct SocScaling {
    w: DMatrix<f64>,
    w_inv: DMatrix<f64>,
}

/// Nesterov-Todd scaling `W` with `W z = W⁻ᵀ s = λ`. Every block is symmetric.
#[derive(Debug, Clone)]
pub(crate) struct NtScaling {
    diag: DVector<f64>,
    soc: Vec<SocScaling>,
    ranges: Vec<Range<usize>>,
    nonneg: usize,
}

impl NtScaling {
    /// Returns `None` if `s` or `z` is not strictly interior.
    pub fn new(cones: &Cones, s: &DVector<f64>, z: &DVector<f64>) -> Option<Self> {
        let mut diag = DVector::zeros(cones.nonneg);
        for i in 0..cones.nonneg {
            if s[i] <= 0.0 || z[i] <= 0.0 {
                return None;
            }
            diag[i] = (s[i] / z[i]).sqrt();
        }
        let ranges = cones.soc_ranges();
        let mut soc = Vec::with_capacity(ranges.len());
        for r in &ranges {
            let sb = s.rows_range(r.clone()).into_owned();
            let zb = z.rows_range(r.clone()).into_owned();
            soc.push(soc_scaling(&sb, &zb)?);
        }
        Some(Self {
            diag,
            soc,
            ranges,
            nonneg: cones.nonneg,
        })
    }

    fn map(&self, u: &DVector<f64>, inverse: bool) -> DVector<f64> {
        let mut out = DVector::zeros(u.len());
        for i in 0..self.nonneg {
            out[i] = if inverse { u[i] / self.diag[i] } else { u[i] * self.diag[i] };
        }
        for (blk, r) in self.soc.iter().zip(&self.ranges) {
            let m = if inverse { &blk.w_inv } else { &blk.w };
            let v = m * u.rows_range(r.clone());
            out.rows_range_mut(r.clone()).copy_from(&v);
        }
        out
    }

    /// `W u`
    pub fn apply(&self, u: &DVector<f64>) -> DVector<f64> {
        self.map(u, false)
    }

    /// `W⁻¹ u`
    pub fn apply_inv(&self, u: &DVector<f64>) -> DVector<f64> {
        self.map(u, true)
    }

    /// `W⁻¹ G`, column by column.
    pub fn apply_inv_rows(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
        for i in 0..self.nonneg {
            out.row_mut(i).copy_from(&(g.row(i) / self.diag[i]));
        }
        for (blk, r) in self.soc.iter().zip(&self.ranges) {
            let rows = g.rows_range(r.clone());
            out.rows_range_mut(r.clone()).copy_from(&(&blk.w_inv * rows));
        }
        out
    }
}

fn soc_scaling(s: &DVector<f64>, z: &DVector<f64>) -> Option<SocScaling> {
    let m = s.len();
    let jnorm2 = |v: &DVector<f64>| v[0] * v[0] - v.rows_range(1..m).norm_squared();
    let (ss, zz) = (jnorm2(s), jnorm2(z));
    if ss <= 0.0 || zz <= 0.0 || s[0] <= 0.0 || z[0] <= 0.0 {
        return None;
    }
    let (sn, zn) = (ss.sqrt(), zz.sqrt());
    let beta = (sn / zn).sqrt();
    let s_bar = s / sn;
    let z_bar = z / zn;
    let gamma = ((1.0 + s_bar.dot(&z_bar)) / 2.0).sqrt();
    let mut w = DVector::zeros(m);
    w[0] = (s_bar[0] + z_bar[0]) / (2.0 * gamma);
    for i in 1..m {
        w[i] = (s_bar[i] - z_bar[i]) / (2.0 * gamma);
    }
    let w0 = w[0];
    let w1 = w.rows_range(1..m).into_owned();
    let mut h = DMatrix::identity(m, m);
    h[(0, 0)] = w0;
    let mut h_inv = DMatrix::identity(m, m);
    h_inv[(0, 0)] = w0;
    for i in 1..m {
        h[(0, i)] = w1[i - 1];
        h[(i, 0)] = w1[i - 1];
        h_inv[(0, i)] = -w1[i - 1];
        h_inv[(i, 0)] = -w1[i - 1];
        for j in 1..m {
            let t = w1[i - 1] * w1[j - 1] / (1.0 + w0);
            h[(i, j)] += t;
            h_inv[(i, j)] += t;
        }
    }
    Some(SocScaling {
        w: h * beta,
        w_inv: h_inv / beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cones() -> Cones {
        Cones {
            nonneg: 2,
            soc: vec![3, 4],
        }
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn scaling_maps_z_and_s_to_same_point() {
        let c = cones();
        let s = v(&[1.0, 2.0, 3.0, 1.0, -1.0, 2.0, 0.5, 0.5, -0.2]);
        let z = v(&[0.5, 4.0, 2.0, -0.5, 0.3, 1.5, -0.4, 0.1, 0.7]);
        let w = NtScaling::new(&c, &s, &z).unwrap();
        let lam_z = w.apply(&z);
        let lam_s = w.apply_inv(&s);
        assert!((&lam_z - &lam_s).amax() < 1e-12, "{lam_z} vs {lam_s}");
        let back = w.apply_inv(&w.apply(&s));
        assert!((back - &s).amax() < 1e-12);
    }

    #[test]
    fn inverse_product_inverts_product() {
        let c = cones();
        let lam = v(&[1.0, 2.0, 3.0, 1.0, -1.0, 2.0, 0.5, 0.5, -0.2]);
        let u = v(&[0.3, -1.0, 0.2, 0.9, -0.4, 1.0, 2.0, -3.0, 0.5]);
        let x = c.inv_product(&lam, &u);
        assert!((c.product(&lam, &x) - u).amax() < 1e-12);
    }

    #[test]
    fn step_to_boundary() {
        let c = Cones {
            nonneg: 1,
            soc: vec![3],
        };
        let x = v(&[1.0, 2.0, 0.0, 0.0]);
        let dx = v(&[-2.0, -1.0, 1.0, 0.0]);
        let a = c.max_step(&x, &dx);
        assert!((a - 0.5).abs() < 1e-12);
        let y = &x + &dx * a;
        assert!(c.min_eig(&y).abs() < 1e-12);
        // Pure interior motion never leaves the cone.
        let up = v(&[1.0, 1.0, 0.0, 0.0]);
        assert!(c.max_step(&x, &up).is_infinite());
    }

    #[test]
    fn push_inside_reaches_interior() {
        let c = cones();
        let mut x = v(&[-1.0, 2.0, 0.0, 3.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        c.push_inside(&mut x);
        assert!(c.min_eig(&x) > 0.0);
    }
}
