//! Neumann heat kernels on boxes, the cosine eigenbasis, the interface operator and `H_{-alpha}` norms.
//!
//! The generator is `1/2 Laplacian`, so a coordinate has variance `t` after time `t`.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Interval, Species};
use crate::quadrature::composite_gauss;

/// Tail bound above which a kernel evaluation carries a truncation warning.
pub const TAIL_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EigenMode {
    pub k: Vec<usize>,
}

impl EigenMode {
    pub fn new(k: &[usize]) -> Self {
        EigenMode { k: k.to_vec() }
    }

    /// Eigenvalue on the unit box.
    pub fn eigenvalue(&self) -> f64 {
        0.5 * PI * PI * self.k.iter().map(|&k| (k * k) as f64).sum::<f64>()
    }

    pub fn eigenvalue_on(&self, bx: &[Interval]) -> f64 {
        self.k
            .iter()
            .zip(bx)
            .map(|(&k, iv)| 0.5 * (PI * k as f64 / iv.len()).powi(2))
            .sum()
    }

    pub fn normalization(&self) -> f64 {
        self.k.iter().map(|&k| if k == 0 { 1.0 } else { SQRT_2 }).product()
    }
}

#[inline]
pub fn mode_1d(k: usize, u: f64) -> f64 {
    if k == 0 {
        1.0
    } else {
        SQRT_2 * (PI * k as f64 * u).cos()
    }
}

#[inline]
pub fn mode_1d_deriv(k: usize, u: f64) -> f64 {
    if k == 0 {
        0.0
    } else {
        -SQRT_2 * PI * k as f64 * (PI * k as f64 * u).sin()
    }
}

/// `phi_k(x)` on `bx`, orthonormal in `L^2(bx)`.
pub fn eigen_eval(k: &EigenMode, x: &[f64], bx: &[Interval]) -> f64 {
    k.k.iter()
        .zip(x)
        .zip(bx)
        .map(|((&ki, &xi), iv)| mode_1d(ki, (xi - iv.lo) / iv.len()) / iv.len().sqrt())
        .product()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Images,
    Spectral,
    /// Images below `t_switch`, cosine series above.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub mode: KernelMode,
    /// Image terms per side.
    pub image_terms: usize,
    /// Largest cosine index; `0` picks the smallest index with `exp(-lambda_K t) < 1e-14`.
    pub spectral_modes: usize,
    /// Switch time for `Auto`; `None` means `0.25 L^2`.
    pub t_switch: Option<f64>,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { mode: KernelMode::Auto, image_terms: 8, spectral_modes: 0, t_switch: None }
    }
}

impl KernelConfig {
    pub fn images() -> Self {
        KernelConfig { mode: KernelMode::Images, ..Default::default() }
    }

    pub fn spectral(k: usize) -> Self {
        KernelConfig { mode: KernelMode::Spectral, spectral_modes: k, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_terms < 1 {
            return Err(invalid("kernel truncation must be at least 1"));
        }
        if let Some(ts) = self.t_switch {
            if !(ts > 0.0) {
                return Err(invalid("t_switch must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelWarning {
    /// The truncation tail bound exceeds [`TAIL_TOLERANCE`].
    TruncationTail,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    pub tail_bound: f64,
    pub warning: Option<KernelWarning>,
}

#[inline]
fn gauss_density(t: f64, z: f64) -> f64 {
    (-0.5 * z * z / t).exp() / (2.0 * PI * t).sqrt()
}

fn spectral_cutoff(t: f64, len: f64) -> usize {
    // smallest K with (2/L) exp(-lambda_{K+1} t) < 1e-14
    let target = (2.0 / len / 1e-14).ln();
    let k = (len / PI) * (2.0 * target / t).sqrt();
    (k.ceil() as usize).clamp(1, 2_000_000)
}

/// One-dimensional Neumann kernel on `iv`; returns `(value, tail bound)`.
pub fn heat_1d(t: f64, u: f64, v: f64, iv: Interval, cfg: &KernelConfig) -> (f64, f64) {
    let len = iv.len();
    // Ordered arguments make p(t, u, v) and p(t, v, u) the same sum term by term.
    let (u, v) = if u <= v { (u, v) } else { (v, u) };
    let use_images = match cfg.mode {
        KernelMode::Images => true,
        KernelMode::Spectral => false,
        KernelMode::Auto => t < cfg.t_switch.unwrap_or(0.25 * len * len),
    };
    if use_images {
        let nt = cfg.image_terms as i64;
        let mut s = 0.0;
        let a = u - v;
        let b = u + v - 2.0 * iv.lo;
        for n in -nt..=nt {
            let shift = 2.0 * n as f64 * len;
            s += gauss_density(t, a - shift) + gauss_density(t, b - shift);
        }
        let far = 2.0 * nt as f64 * len;
        let tail = 4.0 * gauss_density(t, far) / (1.0 - (-2.0 * len * far / t).exp()).max(1e-300);
        (s, tail)
    } else {
        let kmax = if cfg.spectral_modes > 0 { cfg.spectral_modes } else { spectral_cutoff(t, len) };
        let (uu, vv) = ((u - iv.lo) / len, (v - iv.lo) / len);
        let mut s = 1.0;
        for k in 1..=kmax {
            let kp = PI * k as f64;
            let e = (-0.5 * (kp / len).powi(2) * t).exp();
            if e == 0.0 {
                break;
            }
            s += 2.0 * e * (kp * uu).cos() * (kp * vv).cos();
        }
        let lam = 0.5 * (PI * (kmax + 1) as f64 / len).powi(2);
        let ratio = (-lam * t).exp();
        let tail = 2.0 / len * ratio / (1.0 - (-PI * PI * t / (len * len)).exp()).max(1e-300);
        (s / len, tail)
    }
}

/// Transition density of reflected Brownian motion in the box.
pub fn kernel_eval(t: f64, x: &[f64], y: &[f64], bx: &[Interval], cfg: &KernelConfig) -> Result<KernelEval> {
    if !(t > 0.0) {
        return Err(invalid(format!("kernel time must be positive, got {t}")));
    }
    cfg.validate()?;
    if x.len() != bx.len() || y.len() != bx.len() {
        return Err(invalid("point dimension does not match the box"));
    }
    for (p, name) in [(x, "x"), (y, "y")] {
        if !p.iter().zip(bx).all(|(v, iv)| iv.contains(*v)) {
            return Err(invalid(format!("{name} = {p:?} is outside the box")));
        }
    }
    let mut value = 1.0;
    let mut upper = 1.0;
    for ((&u, &v), iv) in x.iter().zip(y).zip(bx) {
        let (p, tail) = heat_1d(t, u, v, *iv, cfg);
        value *= p;
        upper *= p + tail;
    }
    let tail_bound = upper - value;
    let warning = (tail_bound > TAIL_TOLERANCE).then_some(KernelWarning::TruncationTail);
    Ok(KernelEval { value, tail_bound, warning })
}

/// Values on the vertex grid of a box, `n` cells per axis, last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub bx: Vec<Interval>,
    pub n: usize,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(bx: Vec<Interval>, n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || bx.is_empty() {
            return Err(invalid("grid needs at least one cell and one axis"));
        }
        if values.len() != (n + 1).pow(bx.len() as u32) {
            return Err(invalid(format!(
                "grid of {} values does not match {} cells per axis in d = {}",
                values.len(),
                n,
                bx.len()
            )));
        }
        Ok(GridField { bx, n, values })
    }

    pub fn from_fn(bx: Vec<Interval>, n: usize, f: impl Fn(&[f64]) -> f64) -> Self {
        let d = bx.len();
        let total = (n + 1).pow(d as u32);
        let mut values = Vec::with_capacity(total);
        let mut x = vec![0.0; d];
        for idx in 0..total {
            let mut r = idx;
            for a in (0..d).rev() {
                let j = r % (n + 1);
                r /= n + 1;
                x[a] = bx[a].lo + bx[a].len() * j as f64 / n as f64;
            }
            values.push(f(&x));
        }
        GridField { bx, n, values }
    }

    pub fn d(&self) -> usize {
        self.bx.len()
    }

    /// Tensor trapezoid integral.
    pub fn integral(&self) -> f64 {
        let d = self.d();
        let n = self.n;
        let mut s = 0.0;
        for (idx, v) in self.values.iter().enumerate() {
            let mut r = idx;
            let mut w = 1.0;
            for a in (0..d).rev() {
                let j = r % (n + 1);
                r /= n + 1;
                let h = self.bx[a].len() / n as f64;
                w *= if j == 0 || j == n { 0.5 * h } else { h };
            }
            s += w * v;
        }
        s
    }

    pub fn sup_distance(&self, other: &GridField) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Discrete semigroup matrix on `n + 1` vertices: trapezoid cosine analysis, decay, synthesis.
fn semigroup_matrix(t: f64, n: usize, len: f64) -> Vec<f64> {
    let m = n + 1;
    let mut cosines = vec![0.0; m * m];
    for k in 0..m {
        for j in 0..m {
            cosines[k * m + j] = (PI * (k * j) as f64 / n as f64).cos();
        }
    }
    let mut out = vec![0.0; m * m];
    for k in 0..m {
        let decay = (-0.5 * (PI * k as f64 / len).powi(2) * t).exp();
        // Orthogonality of the DCT-I: sum'' cos^2 = n/2, or n at k = 0, n.
        let gamma = if k == 0 || k == n { 1.0 / n as f64 } else { 2.0 / n as f64 };
        let c = decay * gamma;
        if c == 0.0 {
            continue;
        }
        for i in 0..m {
            let ci = cosines[k * m + i] * c;
            for j in 0..m {
                let wj = if j == 0 || j == n { 0.5 } else { 1.0 };
                out[i * m + j] += ci * cosines[k * m + j] * wj;
            }
        }
    }
    out
}

/// `P_t f` for a grid field; exact for cosine modes representable on the grid and trapezoid-mass preserving.
pub fn apply_semigroup(t: f64, f: &GridField, cfg: &KernelConfig) -> Result<GridField> {
    cfg.validate()?;
    if !(t >= 0.0) {
        return Err(invalid(format!("semigroup time must be nonnegative, got {t}")));
    }
    GridField::new(f.bx.clone(), f.n, f.values.clone())?;
    if t == 0.0 {
        return Ok(f.clone());
    }
    let d = f.d();
    let m = f.n + 1;
    let mut vals = f.values.clone();
    let mut line = vec![0.0; m];
    for axis in 0..d {
        let mat = semigroup_matrix(t, f.n, f.bx[axis].len());
        let stride = m.pow((d - 1 - axis) as u32);
        let total = vals.len();
        for base in 0..total {
            if (base / stride) % m != 0 {
                continue;
            }
            for j in 0..m {
                line[j] = vals[base + j * stride];
            }
            for i in 0..m {
                let row = &mat[i * m..(i + 1) * m];
                vals[base + i * stride] = row.iter().zip(&line).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(GridField { bx: f.bx.clone(), n: f.n, values: vals })
}

/// Tensor cosine basis `{0..=kmax}^d` on the reference unit box.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    pub d: usize,
    pub kmax: usize,
    lambdas: Vec<f64>,
}

impl Basis {
    pub fn new(d: usize, kmax: usize) -> Self {
        let m = (kmax + 1).pow(d as u32);
        let mut lambdas = Vec::with_capacity(m);
        for idx in 0..m {
            let mut r = idx;
            let mut s = 0usize;
            for _ in 0..d {
                let k = r % (kmax + 1);
                r /= kmax + 1;
                s += k * k;
            }
            lambdas.push(0.5 * PI * PI * s as f64);
        }
        Basis { d, kmax, lambdas }
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Multi-index of the flattened mode `idx` (last axis fastest).
    pub fn multi_index(&self, idx: usize) -> Vec<usize> {
        let mut k = vec![0; self.d];
        let mut r = idx;
        for a in (0..self.d).rev() {
            k[a] = r % (self.kmax + 1);
            r /= self.kmax + 1;
        }
        k
    }

    pub fn flat_index(&self, k: &[usize]) -> usize {
        k.iter().fold(0, |acc, &ki| acc * (self.kmax + 1) + ki)
    }

    /// Per-axis mode values `phi_k(x_a)` for `k = 0..=kmax`.
    pub fn axis_values(&self, u: f64) -> Vec<f64> {
        (0..=self.kmax).map(|k| mode_1d(k, u)).collect()
    }

    pub fn axis_derivs(&self, u: f64) -> Vec<f64> {
        (0..=self.kmax).map(|k| mode_1d_deriv(k, u)).collect()
    }

    /// Full mode vector at a reference point.
    pub fn mode_values(&self, x: &[f64]) -> Vec<f64> {
        let axes: Vec<Vec<f64>> = x.iter().map(|&u| self.axis_values(u)).collect();
        self.outer(&axes)
    }

    /// Mode vector of `d/dx_axis phi_k` at a reference point.
    pub fn mode_derivs(&self, x: &[f64], axis: usize) -> Vec<f64> {
        let axes: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(a, &u)| if a == axis { self.axis_derivs(u) } else { self.axis_values(u) })
            .collect();
        self.outer(&axes)
    }

    fn outer(&self, axes: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![1.0];
        for ax in axes {
            let mut next = Vec::with_capacity(out.len() * ax.len());
            for &o in &out {
                for &v in ax {
                    next.push(o * v);
                }
            }
            out = next;
        }
        out
    }

    /// `sum_k c_k phi_k(x)` at a reference point.
    pub fn eval(&self, coeffs: &[f64], x: &[f64]) -> f64 {
        let axes: Vec<Vec<f64>> = x.iter().map(|&u| self.axis_values(u)).collect();
        contract(coeffs, &axes)
    }

    pub fn decay(&self, t: f64) -> Vec<f64> {
        self.lambdas.iter().map(|l| (-l * t).exp()).collect()
    }

    /// L2 projection by tensor Gauss-Legendre quadrature with `panels x order` nodes per axis.
    pub fn project(&self, f: &dyn Fn(&[f64]) -> f64, panels: usize, order: usize) -> Vec<f64> {
        let (nodes, weights) = composite_gauss(panels, order, 0.0, 1.0);
        let q = nodes.len();
        let tables: Vec<Vec<f64>> = nodes.iter().map(|&u| self.axis_values(u)).collect();
        let total = q.pow(self.d as u32);
        let mut out = vec![0.0; self.len()];
        let mut x = vec![0.0; self.d];
        let mut axes: Vec<&[f64]> = vec![&[]; self.d];
        for idx in 0..total {
            let mut r = idx;
            let mut w = 1.0;
            for a in (0..self.d).rev() {
                let j = r % q;
                r /= q;
                x[a] = nodes[j];
                w *= weights[j];
                axes[a] = &tables[j];
            }
            let fx = f(&x) * w;
            if fx == 0.0 {
                continue;
            }
            accumulate_outer(&mut out, fx, &axes);
        }
        out
    }
}

/// `out += scale * (axes[0] ⊗ axes[1] ⊗ ...)`.
pub fn accumulate_outer(out: &mut [f64], scale: f64, axes: &[&[f64]]) {
    match axes.len() {
        1 => {
            for (o, v) in out.iter_mut().zip(axes[0]) {
                *o += scale * v;
            }
        }
        2 => {
            let n1 = axes[1].len();
            for (i, a) in axes[0].iter().enumerate() {
                let s = scale * a;
                for (o, b) in out[i * n1..(i + 1) * n1].iter_mut().zip(axes[1]) {
                    *o += s * b;
                }
            }
        }
        _ => {
            let inner: usize = axes[1..].iter().map(|a| a.len()).product();
            for (i, a) in axes[0].iter().enumerate() {
                accumulate_outer(&mut out[i * inner..(i + 1) * inner], scale * a, &axes[1..]);
            }
        }
    }
}

/// `sum_k c_k prod_a axes[a][k_a]`.
pub fn contract(coeffs: &[f64], axes: &[Vec<f64>]) -> f64 {
    match axes.len() {
        1 => coeffs.iter().zip(&axes[0]).map(|(c, v)| c * v).sum(),
        _ => {
            let inner: usize = axes[1..].iter().map(|a| a.len()).product();
            axes[0]
                .iter()
                .enumerate()
                .map(|(i, a)| a * contract(&coeffs[i * inner..(i + 1) * inner], &axes[1..]))
                .sum()
        }
    }
}

/// `∫_I p(theta, x, z) g(z) dσ(z)` for a point of species `s` (physical coordinates).
pub fn surface_op(
    theta: f64,
    s: Species,
    g: &dyn Fn(&[f64]) -> f64,
    x: &[f64],
    cfg: &KernelConfig,
) -> Result<f64> {
    if !(theta > 0.0) {
        return Err(invalid(format!("surface operator needs theta > 0, got {theta}")));
    }
    cfg.validate()?;
    let d = x.len();
    if d == 0 {
        return Err(invalid("empty point"));
    }
    let normal = match s {
        Species::Plus => x[d - 1],
        Species::Minus => -x[d - 1],
    };
    if !(0.0..=1.0).contains(&normal) || !x[..d - 1].iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(invalid(format!("{x:?} is outside the {} box", s.name())));
    }
    let (pn, _) = heat_1d(theta, normal, 0.0, Interval::UNIT, cfg);
    if d == 1 {
        return Ok(pn * g(&[]));
    }
    // The kernel has width sqrt(theta): panels of that width resolve it.
    let panels = ((2.0 / theta.sqrt()).ceil() as usize).clamp(4, 4096);
    let (nodes, weights) = composite_gauss(panels, 8, 0.0, 1.0);
    let q = nodes.len();
    let tables: Vec<Vec<f64>> = (0..d - 1)
        .map(|a| nodes.iter().map(|&z| heat_1d(theta, x[a], z, Interval::UNIT, cfg).0).collect())
        .collect();
    let mut z = vec![0.0; d - 1];
    let mut sum = 0.0;
    for idx in 0..q.pow((d - 1) as u32) {
        let mut r = idx;
        let mut w = 1.0;
        for a in (0..d - 1).rev() {
            let j = r % q;
            r /= q;
            z[a] = nodes[j];
            w *= weights[j] * tables[a][j];
        }
        sum += w * g(&z);
    }
    Ok(pn * sum)
}

/// `#{k : lambda_k <= x}` over the mode lattice of `bx`.
pub fn weyl_count(x: f64, bx: &[Interval]) -> u64 {
    fn rec(budget: f64, axes: &[Interval]) -> u64 {
        if axes.is_empty() {
            return 1;
        }
        let scale = 0.5 * (PI / axes[0].len()).powi(2);
        let mut count = 0;
        let mut k = 0u64;
        loop {
            let lam = scale * (k * k) as f64;
            if lam > budget * (1.0 + 1e-12) + 1e-300 {
                break;
            }
            count += rec(budget - lam, &axes[1..]);
            k += 1;
        }
        count
    }
    if x < 0.0 {
        return 0;
    }
    rec(x, bx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormWarning {
    EmptyCoefficients,
}

/// Pairings `<mu, phi_k>` for both species, in [`Basis`] order on each species' box.
#[derive(Clone, Debug, PartialEq)]
pub struct DualVector {
    pub alpha: f64,
    pub basis: Basis,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl DualVector {
    pub fn new(alpha: f64, basis: Basis, plus: Vec<f64>, minus: Vec<f64>) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(invalid("alpha must be positive"));
        }
        if plus.len() > basis.len() || minus.len() > basis.len() {
            return Err(invalid("more coefficients than modes"));
        }
        if !plus.iter().chain(&minus).all(|c| c.is_finite()) {
            return Err(invalid("non-finite pairing"));
        }
        Ok(DualVector { alpha, basis, plus, minus })
    }

    /// Pairings of the weighted point measures `sum w_i delta_{x_i}` (physical coordinates).
    pub fn from_points(
        alpha: f64,
        basis: Basis,
        plus: &[(Vec<f64>, f64)],
        minus: &[(Vec<f64>, f64)],
    ) -> Result<Self> {
        let d = basis.d;
        let mut cp = vec![0.0; basis.len()];
        let mut cm = vec![0.0; basis.len()];
        for (species, pts, out) in [(Species::Plus, plus, &mut cp), (Species::Minus, minus, &mut cm)] {
            for (x, w) in pts {
                if x.len() != d {
                    return Err(invalid("point dimension mismatch"));
                }
                // Box-local coordinate on D- is y_d + 1.
                let local: Vec<f64> = match species {
                    Species::Plus => x.clone(),
                    Species::Minus => {
                        let mut l = x.clone();
                        l[d - 1] += 1.0;
                        l
                    }
                };
                for (o, v) in out.iter_mut().zip(basis.mode_values(&local)) {
                    *o += w * v;
                }
            }
        }
        DualVector::new(alpha, basis, cp, cm)
    }

    pub fn is_empty(&self) -> bool {
        self.plus.is_empty() && self.minus.is_empty()
    }
}

/// `sqrt(sum_k (1 + lambda_k)^{-alpha} <mu, phi_k>^2)` over both species.
pub fn h_norm(mu: &DualVector) -> (f64, Option<NormWarning>) {
    if mu.is_empty() {
        return (0.0, Some(NormWarning::EmptyCoefficients));
    }
    let lam = mu.basis.lambdas();
    let s: f64 = [&mu.plus, &mu.minus]
        .iter()
        .flat_map(|c| c.iter().zip(lam))
        .map(|(c, l)| (1.0 + l).powf(-mu.alpha) * c * c)
        .sum();
    (s.sqrt(), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equilibrium_and_symmetry() {
        let cfg = KernelConfig::default();
        let bx = [Interval::UNIT];
        let v = kernel_eval(10.0, &[0.2], &[0.9], &bx, &cfg).unwrap();
        assert!((v.value - 1.0).abs() < 1e-9);
        assert!(kernel_eval(0.0, &[0.2], &[0.9], &bx, &cfg).is_err());
        assert!(kernel_eval(0.1, &[1.2], &[0.9], &bx, &cfg).is_err());
    }

    #[test]
    fn images_match_spectral() {
        let bx = [Interval::UNIT];
        let a = kernel_eval(0.1, &[0.3], &[0.7], &bx, &KernelConfig::images()).unwrap();
        let b = kernel_eval(0.1, &[0.3], &[0.7], &bx, &KernelConfig::spectral(200)).unwrap();
        assert!((a.value - b.value).abs() < 1e-10);
        assert!(a.warning.is_none() && b.warning.is_none());
    }

    #[test]
    fn short_spectral_truncation_warns() {
        let bx = [Interval::UNIT];
        let v = kernel_eval(1e-3, &[0.3], &[0.3], &bx, &KernelConfig::spectral(5)).unwrap();
        assert_eq!(v.warning, Some(KernelWarning::TruncationTail));
    }

    #[test]
    fn weyl_examples() {
        let b1 = [Interval::UNIT];
        assert_eq!(weyl_count(0.0, &b1), 1);
        assert_eq!(weyl_count(PI * PI / 2.0, &b1), 2);
        let b2 = [Interval::UNIT; 2];
        let mut brute = 0;
        for k1 in 0..100u64 {
            for k2 in 0..100u64 {
                if 0.5 * PI * PI * ((k1 * k1 + k2 * k2) as f64) <= 1e3 {
                    brute += 1;
                }
            }
        }
        assert_eq!(weyl_count(1e3, &b2), brute);
    }

    #[test]
    fn h_norm_examples() {
        let b = Basis::new(1, 1);
        let mu = DualVector::new(2.0, b.clone(), vec![3.0], vec![]).unwrap();
        assert_eq!(h_norm(&mu), (3.0, None));
        let mu = DualVector::new(2.0, b.clone(), vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(h_norm(&mu).0, 0.0);
        let (c0, c1) = (0.7, -1.3);
        let mu = DualVector::new(2.0, b.clone(), vec![c0, c1], vec![]).unwrap();
        let expect = (c0 * c0 + c1 * c1 / (1.0 + PI * PI / 2.0).powi(2)).sqrt();
        assert!((h_norm(&mu).0 - expect).abs() < 1e-14);
        let empty = DualVector::new(1.0, b, vec![], vec![]).unwrap();
        assert_eq!(h_norm(&empty), (0.0, Some(NormWarning::EmptyCoefficients)));
    }

    #[test]
    fn eigen_examples() {
        let bx = [Interval::UNIT];
        assert_eq!(eigen_eval(&EigenMode::new(&[0]), &[0.37], &bx), 1.0);
        assert!(eigen_eval(&EigenMode::new(&[1]), &[0.5], &bx).abs() < 1e-15);
        let m = EigenMode::new(&[1, 2]);
        assert!((m.eigenvalue() - 2.5 * PI * PI).abs() < 1e-12);
        let minus = [Interval::UNIT, Interval { lo: -1.0, hi: 0.0 }];
        assert!((eigen_eval(&m, &[0.0, -1.0], &minus) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn basis_projection_recovers_modes() {
        let b = Basis::new(2, 4);
        let c = b.project(&|x: &[f64]| mode_1d(2, x[0]) * mode_1d(3, x[1]) + 0.5, 4, 8);
        for (i, v) in c.iter().enumerate() {
            let k = b.multi_index(i);
            let expect = if k == [2, 3] {
                1.0
            } else if k == [0, 0] {
                0.5
            } else {
                0.0
            };
            assert!((v - expect).abs() < 1e-12, "{k:?}: {v}");
        }
        assert!((b.eval(&c, &[0.3, 0.8]) - (mode_1d(2, 0.3) * mode_1d(3, 0.8) + 0.5)).abs() < 1e-12);
    }
}
