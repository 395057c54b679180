//! Deterministic limit objects: `f^N`, the hydrodynamic pair, the backward evolutions
//! `Q^N`, `Q`, the dual action `U`, and the martingale and Ornstein-Uhlenbeck covariances.
//!
//! Fields live in the tensor cosine basis of the reference box. Both species share it, with the
//! interface at `x_d = 0`. Every equation becomes `c' = -Lambda c + S(t, c)` and is marched with an
//! exponential integrator that interpolates the source linearly on each step. The nonlinear or
//! coupled source is resolved by Picard iteration inside each step.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::annihilation::{AnnihilationKernel, PairNodeOptions, PairNodes};
use crate::error::{invalid, Error, Result};
use crate::geometry::Species;
use crate::linalg::{gemv, tensor_apply, transpose};
use crate::observable::{ObservablePair, TestFunction};
use crate::quadrature::composite_gauss;
use crate::spectral::{mode_1d, mode_1d_deriv, Basis, DualVector};

/// Factor in front of the coupling term of the backward integral equations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuhamelPrefactor {
    /// Coefficient of the backward PDE and of its Feynman-Kac representation.
    Unit,
    /// The `1/2` shown in front of the displayed integral equations.
    Half,
}

impl DuhamelPrefactor {
    pub fn value(self) -> f64 {
        match self {
            DuhamelPrefactor::Unit => 1.0,
            DuhamelPrefactor::Half => 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub picard_tol: f64,
    pub max_iter: usize,
    /// Highest cosine index per axis; 0 picks a default for the solve at hand.
    pub kmax: usize,
    /// For `delta`-kernel solves with `kmax = 0`: `kmax ≈ modes_per_delta / delta`.
    pub modes_per_delta: f64,
    /// Uniform steps on `[T/8, T]`.
    pub steps: usize,
    /// Steps of the graded mesh on `[0, T/8]`.
    pub graded_steps: usize,
    pub grading: f64,
    /// `T0 = min(T, horizon_guard / C0^2)`.
    pub horizon_guard: f64,
    pub override_horizon: bool,
    pub prefactor: DuhamelPrefactor,
    /// Node counts of the pair quadrature; `None` scales them with `kmax * delta`.
    pub pair_nodes: Option<PairNodeOptions>,
    pub check_negativity: bool,
    /// Cosine index cap of the correlation hierarchy; 0 means `hierarchy_modes_per_delta / delta`.
    pub hierarchy_kmax: usize,
    pub hierarchy_modes_per_delta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            picard_tol: 1e-9,
            max_iter: 200,
            kmax: 0,
            modes_per_delta: 12.0,
            steps: 224,
            graded_steps: 32,
            grading: 2.0,
            horizon_guard: 0.25,
            override_horizon: false,
            prefactor: DuhamelPrefactor::Unit,
            pair_nodes: None,
            check_negativity: true,
            hierarchy_kmax: 0,
            hierarchy_modes_per_delta: 4.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.picard_tol > 0.0) {
            return Err(Error::Config("picard_tol must be positive".into()));
        }
        if self.max_iter == 0 || self.steps == 0 {
            return Err(Error::Config("max_iter and steps must be positive".into()));
        }
        if !(self.grading >= 1.0) {
            return Err(Error::Config("grading exponent must be at least 1".into()));
        }
        if !(self.horizon_guard > 0.0) {
            return Err(Error::Config("horizon_guard must be positive".into()));
        }
        if !(self.hierarchy_modes_per_delta > 0.0) {
            return Err(Error::Config("hierarchy_modes_per_delta must be positive".into()));
        }
        Ok(())
    }

    /// Same configuration with every step halved.
    pub fn refined(&self) -> Self {
        let mut c = self.clone();
        c.steps *= 2;
        c.graded_steps *= 2;
        c
    }

    pub fn hydro_kmax(&self, d: usize) -> usize {
        if self.kmax > 0 {
            return self.kmax;
        }
        match d {
            1 => 2048,
            2 => 32,
            _ => 8,
        }
    }

    pub fn kernel_kmax(&self, kernel: &AnnihilationKernel) -> usize {
        if self.kmax > 0 {
            return self.kmax;
        }
        let k = (self.modes_per_delta / kernel.delta).ceil() as usize;
        match kernel.d {
            1 => k.clamp(32, 2048),
            2 => (k / 3).clamp(8, 24),
            _ => 6,
        }
    }

    pub fn hierarchy_kmax(&self, kernel: &AnnihilationKernel) -> usize {
        if self.hierarchy_kmax > 0 {
            return self.hierarchy_kmax;
        }
        let k = (self.hierarchy_modes_per_delta / kernel.delta).ceil() as usize;
        match kernel.d {
            1 => k.clamp(16, 512),
            2 => (k / 3).clamp(6, 16),
            _ => 4,
        }
    }

    pub fn pair_options(&self, kernel: &AnnihilationKernel, kmax: usize) -> PairNodeOptions {
        if let Some(p) = self.pair_nodes {
            return p;
        }
        let span = std::f64::consts::PI * kmax as f64 * kernel.delta;
        if kernel.d == 1 {
            let n = ((0.5 * span).ceil() as usize + 12).clamp(16, 64);
            PairNodeOptions { radial: n, angular: n, tangential: 1, centre_panels: 1 }
        } else {
            let n = ((0.5 * span).ceil() as usize + 4).clamp(6, 12);
            PairNodeOptions { radial: n, angular: n, tangential: 3, centre_panels: (kmax + 1).div_ceil(6).max(2) }
        }
    }
}

/// `T0 = min(T, guard / C0^2)` with `C0 = max(|u0+|, |u0-|)`.
pub fn horizon(t_end: f64, c0: f64, cfg: &SolverConfig) -> f64 {
    if c0 <= 0.0 {
        return t_end;
    }
    t_end.min(cfg.horizon_guard / (c0 * c0))
}

fn check_horizon(t_end: f64, c0: f64, cfg: &SolverConfig) -> Result<()> {
    let t0 = horizon(t_end, c0, cfg);
    if t_end > t0 * (1.0 + 1e-12) && !cfg.override_horizon {
        return Err(Error::Horizon { requested: t_end, t0 });
    }
    Ok(())
}

/// Sup norm over a sampling grid.
pub fn sup_abs(f: &TestFunction, d: usize) -> f64 {
    let n: usize = match d {
        1 => 2049,
        2 => 129,
        _ => 17,
    };
    let mut x = vec![0.0; d];
    let mut m: f64 = 0.0;
    for idx in 0..n.pow(d as u32) {
        let mut r = idx;
        for a in (0..d).rev() {
            x[a] = (r % n) as f64 / (n - 1) as f64;
            r /= n;
        }
        m = m.max(f.value(&x).abs());
    }
    m
}

/// Time nodes: a mesh graded with the configured exponent on `[0, T/8]`, uniform after,
/// with requested times inserted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn build(t_end: f64, cfg: &SolverConfig, extra: &[f64]) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(invalid(format!("horizon must be positive, got {t_end}")));
        }
        let knee = t_end / 8.0;
        let mut times = vec![0.0];
        let g = cfg.graded_steps.max(1);
        for i in 1..=g {
            times.push(knee * (i as f64 / g as f64).powf(cfg.grading));
        }
        for i in 1..=cfg.steps {
            times.push(knee + (t_end - knee) * i as f64 / cfg.steps as f64);
        }
        for &t in extra {
            if !(0.0..=t_end * (1.0 + 1e-12)).contains(&t) {
                return Err(invalid(format!("requested time {t} outside [0, {t_end}]")));
            }
            times.push(t.min(t_end));
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        let tol = 1e-12 * t_end;
        let mut out: Vec<f64> = Vec::with_capacity(times.len());
        for t in times {
            match out.last_mut() {
                Some(last) if (t - *last).abs() <= tol => {
                    // Keep a requested time exactly.
                    if extra.contains(&t) {
                        *last = t;
                    }
                }
                _ => out.push(t),
            }
        }
        Ok(TimeGrid { times: out })
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty grid")
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        index_of(&self.times, t)
    }
}

fn index_of(times: &[f64], t: f64) -> Result<usize> {
    let scale = times.last().copied().unwrap_or(1.0).max(1e-300);
    times
        .iter()
        .position(|&s| (s - t).abs() <= 1e-10 * scale)
        .ok_or_else(|| invalid(format!("time {t} is not a node of the solver grid")))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    /// Largest number of Picard sweeps taken by any step.
    pub iterations: usize,
    pub total_iterations: usize,
    /// Largest final increment over all steps.
    pub last_increment: f64,
    /// Increment history of the step that needed the most sweeps.
    pub worst_history: Vec<f64>,
}

/// `(a0, a1)` with `∫_0^tau e^{-lam (tau - s)} [S0 (1 - s/h) + S1 s/h] ds = a0 S0 + a1 S1`.
#[inline]
fn exp_weights(lam: f64, tau: f64, h: f64) -> (f64, f64) {
    let x = lam * tau;
    let (phi1, psi) = if x < 1e-3 {
        (
            tau * (1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0),
            tau * tau * (0.5 - x / 6.0 + x * x / 24.0 - x * x * x / 120.0),
        )
    } else {
        let e = (-x).exp();
        (tau * (1.0 - e) / x, tau * tau * (x - 1.0 + e) / (x * x))
    };
    (phi1 - psi / h, psi / h)
}

pub(crate) struct Marched {
    pub states: Vec<Vec<f64>>,
    pub sources: Vec<Vec<f64>>,
    pub stats: SolveStats,
}

/// March `c' = -decay c + S(j, c)` over the steps `hs`, resolving `S` at the new node by Picard.
pub(crate) fn march(
    decay: &[f64],
    hs: &[f64],
    init: Vec<f64>,
    weight: &[f64],
    cfg: &SolverConfig,
    source: &mut dyn FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<Marched> {
    let n = init.len();
    let mut stats = SolveStats::default();
    let s0 = source(0, &init)?;
    let mut states = vec![init];
    let mut sources = vec![s0];
    let mut e = vec![0.0; n];
    let mut w0 = vec![0.0; n];
    let mut w1 = vec![0.0; n];
    for (j, &h) in hs.iter().enumerate() {
        for i in 0..n {
            let (a0, a1) = exp_weights(decay[i], h, h);
            e[i] = (-decay[i] * h).exp();
            w0[i] = a0;
            w1[i] = a1;
        }
        let cj = &states[j];
        let sj = &sources[j];
        let base: Vec<f64> = (0..n).map(|i| e[i] * cj[i] + w0[i] * sj[i]).collect();
        let mut c: Vec<f64> = (0..n).map(|i| base[i] + w1[i] * sj[i]).collect();
        let mut history = vec![];
        let mut it = 0;
        let s_last = loop {
            it += 1;
            let s_new = source(j + 1, &c)?;
            let mut inc = 0.0;
            for i in 0..n {
                let v = base[i] + w1[i] * s_new[i];
                inc += weight[i] * (v - c[i]).abs();
                c[i] = v;
            }
            history.push(inc);
            if !inc.is_finite() {
                return Err(Error::NonConvergence { iterations: it, increment: inc });
            }
            if inc < cfg.picard_tol {
                break s_new;
            }
            if it >= cfg.max_iter {
                return Err(Error::NonConvergence { iterations: it, increment: inc });
            }
        };
        stats.total_iterations += it;
        stats.last_increment = stats.last_increment.max(*history.last().unwrap_or(&0.0));
        if it > stats.iterations {
            stats.iterations = it;
            stats.worst_history = history;
        }
        states.push(c);
        sources.push(s_last);
    }
    Ok(Marched { states, sources, stats })
}

/// Interface and box quadratures for one basis.
#[derive(Clone, Debug)]
pub struct Galerkin {
    pub basis: Basis,
    nk: usize,
    // Interface: 1-d Gauss nodes per tangential axis.
    iface_n: usize,
    iface_w1: Vec<f64>,
    iface_tab: Vec<f64>,
    iface_tab_t: Vec<f64>,
    normal: Vec<f64>,
    // Box: 1-d Gauss nodes per axis.
    grid_n: usize,
    grid_w1: Vec<f64>,
    grid_tab: Vec<f64>,
    grid_der: Vec<f64>,
}

impl Galerkin {
    pub fn new(d: usize, kmax: usize) -> Self {
        let basis = Basis::new(d, kmax);
        let nk = kmax + 1;
        let panels = (3 * nk).div_ceil(8) + 2;
        let (inodes, iw) = composite_gauss(panels, 8, 0.0, 1.0);
        let iface_n = if d > 1 { inodes.len() } else { 1 };
        let mut iface_tab = vec![0.0; iface_n * nk];
        if d > 1 {
            for (q, &z) in inodes.iter().enumerate() {
                for k in 0..nk {
                    iface_tab[q * nk + k] = mode_1d(k, z);
                }
            }
        }
        let iface_tab_t = transpose(&iface_tab, iface_n, nk);
        let normal: Vec<f64> = (0..nk).map(|k| mode_1d(k, 0.0)).collect();
        let (gnodes, gw) = composite_gauss(panels, 8, 0.0, 1.0);
        let grid_n = gnodes.len();
        let mut grid_tab = vec![0.0; grid_n * nk];
        let mut grid_der = vec![0.0; grid_n * nk];
        for (q, &z) in gnodes.iter().enumerate() {
            for k in 0..nk {
                grid_tab[q * nk + k] = mode_1d(k, z);
                grid_der[q * nk + k] = mode_1d_deriv(k, z);
            }
        }
        Galerkin {
            basis,
            nk,
            iface_n,
            iface_w1: if d > 1 { iw } else { vec![1.0] },
            iface_tab,
            iface_tab_t,
            normal,
            grid_n,
            grid_w1: gw,
            grid_tab,
            grid_der,
        }
    }

    pub fn d(&self) -> usize {
        self.basis.d
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    fn m_tan(&self) -> usize {
        self.nk.pow(self.d() as u32 - 1)
    }

    /// Number of interface quadrature nodes.
    pub fn interface_len(&self) -> usize {
        self.iface_n.pow(self.d() as u32 - 1)
    }

    pub fn interface_weights(&self) -> Vec<f64> {
        tensor_weights(&self.iface_w1, self.d() - 1)
    }

    /// Field values at the interface nodes.
    pub fn interface_values(&self, c: &[f64]) -> Vec<f64> {
        let mt = self.m_tan();
        let nk = self.nk;
        let hat: Vec<f64> =
            (0..mt).map(|t| (0..nk).map(|kd| c[t * nk + kd] * self.normal[kd]).sum()).collect();
        let d = self.d();
        if d == 1 {
            return hat;
        }
        let shape = vec![nk; d - 1];
        let mats: Vec<&[f64]> = vec![&self.iface_tab; d - 1];
        tensor_apply(&hat, &shape, &mats, &vec![self.iface_n; d - 1])
    }

    /// `out_k += scale ∫_I g phi_k dσ` for `g` given at the interface nodes (weights not applied).
    pub fn interface_project(&self, g: &[f64], scale: f64, out: &mut [f64]) {
        let d = self.d();
        let nk = self.nk;
        let hat = if d == 1 {
            vec![g[0]]
        } else {
            let w = self.interface_weights();
            let gw: Vec<f64> = g.iter().zip(&w).map(|(a, b)| a * b).collect();
            let mats: Vec<&[f64]> = vec![&self.iface_tab_t; d - 1];
            tensor_apply(&gw, &vec![self.iface_n; d - 1], &mats, &vec![nk; d - 1])
        };
        for (t, h) in hat.iter().enumerate() {
            let s = scale * h;
            for kd in 0..nk {
                out[t * nk + kd] += s * self.normal[kd];
            }
        }
    }

    /// `∫_I g dσ` for `g` at the interface nodes.
    pub fn interface_integral(&self, g: &[f64]) -> f64 {
        if self.d() == 1 {
            return g[0];
        }
        g.iter().zip(self.interface_weights()).map(|(a, b)| a * b).sum()
    }

    pub fn grid_len(&self) -> usize {
        self.grid_n.pow(self.d() as u32)
    }

    pub fn grid_weights(&self) -> Vec<f64> {
        tensor_weights(&self.grid_w1, self.d())
    }

    pub fn grid_values(&self, c: &[f64]) -> Vec<f64> {
        let d = self.d();
        let mats: Vec<&[f64]> = vec![&self.grid_tab; d];
        tensor_apply(c, &vec![self.nk; d], &mats, &vec![self.grid_n; d])
    }

    /// Gradient components at the box nodes.
    pub fn grid_gradient(&self, c: &[f64]) -> Vec<Vec<f64>> {
        let d = self.d();
        (0..d)
            .map(|a| {
                let mats: Vec<&[f64]> =
                    (0..d).map(|b| if a == b { &self.grid_der[..] } else { &self.grid_tab[..] }).collect();
                tensor_apply(c, &vec![self.nk; d], &mats, &vec![self.grid_n; d])
            })
            .collect()
    }

    pub fn project(&self, f: &TestFunction) -> Vec<f64> {
        let panels = (self.nk.div_ceil(4) + 2).max(4);
        self.basis.project(&|x| f.value(x), panels, 8)
    }

    /// Sup-norm weights of the coefficients.
    pub fn sup_weights(&self) -> Vec<f64> {
        vec![SQRT_2.powi(self.d() as i32); self.len()]
    }
}

fn tensor_weights(w1: &[f64], dims: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..dims {
        let mut next = Vec::with_capacity(out.len() * w1.len());
        for &o in &out {
            for &w in w1 {
                next.push(o * w);
            }
        }
        out = next;
    }
    out
}

/// Mode tables at the pair-quadrature nodes.
#[derive(Clone, Debug)]
pub struct PairOps {
    pub nodes: PairNodes,
    m: usize,
    phix: Vec<f64>,
    phiy: Vec<f64>,
}

impl PairOps {
    pub fn new(basis: &Basis, nodes: PairNodes) -> Self {
        let m = basis.len();
        let q = nodes.len();
        let mut phix = Vec::with_capacity(q * m);
        let mut phiy = Vec::with_capacity(q * m);
        for i in 0..q {
            phix.extend(basis.mode_values(nodes.x_at(i)));
            phiy.extend(basis.mode_values(nodes.y_at(i)));
        }
        PairOps { nodes, m, phix, phiy }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.nodes.w
    }

    pub fn table(&self, s: Species) -> &[f64] {
        match s {
            Species::Plus => &self.phix,
            Species::Minus => &self.phiy,
        }
    }

    /// Field values at the nodes of species `s`.
    pub fn values(&self, s: Species, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        if !self.is_empty() {
            gemv(self.len(), self.m, self.table(s), false, c, &mut out, 0.0);
        }
        out
    }

    /// `out += sum_q g_q phi_k(node_q)`; `g` already carries the weights.
    pub fn project(&self, s: Species, g: &[f64], out: &mut [f64]) {
        if !self.is_empty() {
            gemv(self.len(), self.m, self.table(s), true, g, out, 1.0);
        }
    }
}

/// A solved pair of fields on a time grid, in basis coefficients.
#[derive(Clone, Debug)]
pub struct FieldPair {
    pub kind: String,
    pub basis: Basis,
    pub times: Vec<f64>,
    pub plus: Vec<Vec<f64>>,
    pub minus: Vec<Vec<f64>>,
    /// Source coefficients at the nodes, for dense output between nodes.
    pub src_plus: Vec<Vec<f64>>,
    pub src_minus: Vec<Vec<f64>>,
    pub stats: SolveStats,
    pub tol: f64,
}

impl FieldPair {
    fn from_marched(kind: &str, basis: Basis, times: Vec<f64>, m: Marched, tol: f64) -> Self {
        let len = basis.len();
        let split = |v: &Vec<Vec<f64>>| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            v.iter().map(|s| (s[..len].to_vec(), s[len..2 * len].to_vec())).unzip()
        };
        let (plus, minus) = split(&m.states);
        let (src_plus, src_minus) = split(&m.sources);
        FieldPair { kind: kind.into(), basis, times, plus, minus, src_plus, src_minus, stats: m.stats, tol }
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        index_of(&self.times, t)
    }

    pub fn coeffs(&self, s: Species, idx: usize) -> &[f64] {
        match s {
            Species::Plus => &self.plus[idx],
            Species::Minus => &self.minus[idx],
        }
    }

    pub fn coeffs_at(&self, s: Species, t: f64) -> Result<&[f64]> {
        Ok(self.coeffs(s, self.index_of(t)?))
    }

    /// Value at a reference point.
    pub fn eval(&self, s: Species, idx: usize, x_ref: &[f64]) -> f64 {
        self.basis.eval(self.coeffs(s, idx), x_ref)
    }

    /// Value at a physical point at a grid time.
    pub fn eval_physical(&self, s: Species, t: f64, x: &[f64]) -> Result<f64> {
        let idx = self.index_of(t)?;
        let r = crate::geometry::to_reference(s, x);
        Ok(self.eval(s, idx, &r))
    }

    /// `∫ f_s(t) phi` given the coefficients of `phi`.
    pub fn pairing(&self, s: Species, idx: usize, phi: &[f64]) -> f64 {
        self.coeffs(s, idx).iter().zip(phi).map(|(a, b)| a * b).sum()
    }

    /// Total mass of species `s`.
    pub fn mass(&self, s: Species, idx: usize) -> f64 {
        self.coeffs(s, idx)[0]
    }

    /// Coefficients at `times[j] + tau` for `0 <= tau <= times[j+1] - times[j]`.
    pub fn dense(&self, s: Species, j: usize, tau: f64) -> Vec<f64> {
        let h = self.times[j + 1] - self.times[j];
        let (c, s0, s1) = match s {
            Species::Plus => (&self.plus[j], &self.src_plus[j], &self.src_plus[j + 1]),
            Species::Minus => (&self.minus[j], &self.src_minus[j], &self.src_minus[j + 1]),
        };
        self.basis
            .lambdas()
            .iter()
            .enumerate()
            .map(|(i, &lam)| {
                let (a0, a1) = exp_weights(lam, tau, h);
                (-lam * tau).exp() * c[i] + a0 * s0[i] + a1 * s1[i]
            })
            .collect()
    }

    fn vertex_table(&self, n: usize) -> Vec<f64> {
        let nk = self.basis.kmax + 1;
        let mut tab = vec![0.0; n * nk];
        for i in 0..n {
            let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            for k in 0..nk {
                tab[i * nk + k] = mode_1d(k, u);
            }
        }
        tab
    }

    fn grid_values_with(&self, s: Species, idx: usize, n: usize, tab: &[f64]) -> Vec<f64> {
        let d = self.basis.d;
        let nk = self.basis.kmax + 1;
        let mats: Vec<&[f64]> = vec![tab; d];
        tensor_apply(self.coeffs(s, idx), &vec![nk; d], &mats, &vec![n; d])
    }

    /// Values on the vertex grid with `n` points per axis (reference coordinates).
    pub fn grid_values(&self, s: Species, idx: usize, n: usize) -> Vec<f64> {
        self.grid_values_with(s, idx, n, &self.vertex_table(n))
    }

    /// CSV with rows `time, box, i_0, ..., i_{d-1}, value` on an `n`-point vertex grid.
    pub fn to_csv(&self, n: usize) -> String {
        let d = self.basis.d;
        let mut out = String::from("time,box");
        for a in 0..d {
            out.push_str(&format!(",i{a}"));
        }
        out.push_str(",value\n");
        let tab = self.vertex_table(n);
        for (idx, t) in self.times.iter().enumerate() {
            for s in Species::BOTH {
                let vals = self.grid_values_with(s, idx, n, &tab);
                for (flat, v) in vals.iter().enumerate() {
                    out.push_str(&format!("{t:.12e},{}", s.name()));
                    let mut r = flat;
                    let mut ix = vec![0; d];
                    for a in (0..d).rev() {
                        ix[a] = r % n;
                        r /= n;
                    }
                    for i in ix {
                        out.push_str(&format!(",{i}"));
                    }
                    out.push_str(&format!(",{v:.12e}\n"));
                }
            }
        }
        out
    }

    pub fn sidecar_json(&self, n: usize) -> serde_json::Value {
        json!({
            "kind": self.kind,
            "d": self.basis.d,
            "kmax": self.basis.kmax,
            "grid_points_per_axis": n,
            "coordinates": "reference: both boxes [0,1]^d, interface at x_d = 0, minus box mirrored",
            "times": self.times.len(),
            "t_end": self.times.last(),
            "picard_tol": self.tol,
            "iterations": self.stats.iterations,
            "total_iterations": self.stats.total_iterations,
            "last_increment": self.stats.last_increment,
            "worst_history": self.stats.worst_history,
        })
    }

    fn check_nonnegative(&self, tol: f64) -> Result<()> {
        let n = match self.basis.d {
            1 => 257,
            2 => 33,
            _ => 9,
        };
        let tab = self.vertex_table(n);
        for (idx, &t) in self.times.iter().enumerate() {
            for s in Species::BOTH {
                let c = self.coeffs(s, idx);
                // Allowance for truncation: the tail of the top decile of modes.
                let cut = self.basis.len() * 9 / 10;
                let tail: f64 =
                    c[cut..].iter().map(|v| v.abs()).sum::<f64>() * SQRT_2.powi(self.basis.d as i32);
                let min = self.grid_values_with(s, idx, n, &tab).into_iter().fold(f64::INFINITY, f64::min);
                if min < -10.0 * tol - tail {
                    return Err(Error::Negativity { value: min, time: t });
                }
            }
        }
        Ok(())
    }
}

fn project_pair(g: &Galerkin, f: &ObservablePair) -> Vec<f64> {
    let mut c = g.project(&f.plus);
    c.extend(g.project(&f.minus));
    c
}

pub(crate) fn steps_of(times: &[f64]) -> Vec<f64> {
    times.windows(2).map(|w| w[1] - w[0]).collect()
}

fn doubled(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    out.extend_from_slice(v);
    out
}

/// Initial data sup norm `C0`.
pub fn initial_bound(u0: &ObservablePair, d: usize) -> f64 {
    sup_abs(&u0.plus, d).max(sup_abs(&u0.minus, d))
}

/// Picard solution of `f+ = P u0+ - ∫ P(f+ ∫ ell f-)` and its mirror.
pub fn solve_fn(
    kernel: &AnnihilationKernel,
    u0: &ObservablePair,
    t_end: f64,
    extra_times: &[f64],
    cfg: &SolverConfig,
) -> Result<FieldPair> {
    cfg.validate()?;
    let d = kernel.d;
    u0.validate(d)?;
    check_horizon(t_end, initial_bound(u0, d), cfg)?;
    let gal = Galerkin::new(d, cfg.kernel_kmax(kernel));
    let grid = TimeGrid::build(t_end, cfg, extra_times)?;
    let ops = PairOps::new(&gal.basis, PairNodes::build(kernel, &cfg.pair_options(kernel, gal.basis.kmax))?);
    let m = gal.len();
    let mut source = |_: usize, c: &[f64]| -> Result<Vec<f64>> {
        let mut s = vec![0.0; 2 * m];
        if ops.is_empty() {
            return Ok(s);
        }
        let fp = ops.values(Species::Plus, &c[..m]);
        let fm = ops.values(Species::Minus, &c[m..]);
        let g: Vec<f64> = ops.weights().iter().zip(fp.iter().zip(&fm)).map(|(w, (a, b))| -w * a * b).collect();
        let (sp, sm) = s.split_at_mut(m);
        ops.project(Species::Plus, &g, sp);
        ops.project(Species::Minus, &g, sm);
        Ok(s)
    };
    let marched = march(
        &doubled(gal.basis.lambdas()),
        &steps_of(&grid.times),
        project_pair(&gal, u0),
        &doubled(&gal.sup_weights()),
        cfg,
        &mut source,
    )?;
    let out = FieldPair::from_marched("f_N", gal.basis.clone(), grid.times, marched, cfg.picard_tol);
    if cfg.check_negativity {
        out.check_nonnegative(cfg.picard_tol)?;
    }
    Ok(out)
}

/// Picard solution of `u+ = P u0+ - ∫ G^+(lambda_eff u+ u-)` and its mirror.
pub fn solve_hydro(
    d: usize,
    u0: &ObservablePair,
    lambda_eff: f64,
    t_end: f64,
    extra_times: &[f64],
    cfg: &SolverConfig,
) -> Result<FieldPair> {
    cfg.validate()?;
    u0.validate(d)?;
    if !(lambda_eff >= 0.0) {
        return Err(invalid("lambda_eff must be nonnegative"));
    }
    check_horizon(t_end, initial_bound(u0, d), cfg)?;
    let gal = Galerkin::new(d, cfg.hydro_kmax(d));
    let grid = TimeGrid::build(t_end, cfg, extra_times)?;
    let m = gal.len();
    let mut source = |_: usize, c: &[f64]| -> Result<Vec<f64>> {
        let mut s = vec![0.0; 2 * m];
        if lambda_eff == 0.0 {
            return Ok(s);
        }
        let up = gal.interface_values(&c[..m]);
        let um = gal.interface_values(&c[m..]);
        let g: Vec<f64> = up.iter().zip(&um).map(|(a, b)| a * b).collect();
        gal.interface_project(&g, -lambda_eff, &mut s[..m]);
        gal.interface_project(&g, -lambda_eff, &mut s[m..]);
        Ok(s)
    };
    let marched = march(
        &doubled(gal.basis.lambdas()),
        &steps_of(&grid.times),
        project_pair(&gal, u0),
        &doubled(&gal.sup_weights()),
        cfg,
        &mut source,
    )?;
    let out = FieldPair::from_marched("hydro", gal.basis.clone(), grid.times, marched, cfg.picard_tol);
    if cfg.check_negativity {
        out.check_nonnegative(cfg.picard_tol)?;
    }
    Ok(out)
}

/// `∫_I u+ u- dσ` at every node of a hydrodynamic solution.
pub fn interface_loss_rate(u: &FieldPair) -> Vec<f64> {
    let gal = Galerkin::new(u.basis.d, u.basis.kmax);
    (0..u.times.len())
        .map(|i| {
            let a = gal.interface_values(&u.plus[i]);
            let b = gal.interface_values(&u.minus[i]);
            let g: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
            gal.interface_integral(&g)
        })
        .collect()
}

/// Backward evolution `Q_{s,t}` for a fixed forward background.
pub trait BackwardEvolution {
    fn galerkin(&self) -> &Galerkin;
    fn times(&self) -> &[f64];
    /// Solve from terminal coefficients at node `it` back to node `is`.
    fn solve_nodes(&self, is: usize, it: usize, terminal: Vec<f64>) -> Result<FieldPair>;

    fn solve(&self, s: f64, t: f64, terminal: &ObservablePair) -> Result<FieldPair> {
        let is = index_of(self.times(), s)?;
        let it = index_of(self.times(), t)?;
        if is > it {
            return Err(invalid("backward evolution needs s <= t"));
        }
        self.solve_nodes(is, it, project_pair(self.galerkin(), terminal))
    }
}

fn march_backward(
    gal: &Galerkin,
    times: &[f64],
    is: usize,
    it: usize,
    terminal: Vec<f64>,
    cfg: &SolverConfig,
    kind: &str,
    source: &mut dyn FnMut(usize, &[f64]) -> Result<Vec<f64>>,
) -> Result<FieldPair> {
    let m = gal.len();
    if terminal.len() != 2 * m {
        return Err(invalid("terminal data has the wrong number of coefficients"));
    }
    let hs: Vec<f64> = (is..it).rev().map(|i| times[i + 1] - times[i]).collect();
    let mut wrapped = |j: usize, c: &[f64]| source(it - j, c);
    let mut marched =
        march(&doubled(gal.basis.lambdas()), &hs, terminal, &doubled(&gal.sup_weights()), cfg, &mut wrapped)?;
    marched.states.reverse();
    marched.sources.reverse();
    // Dense output is not meaningful backwards; keep the sources for reference only.
    Ok(FieldPair::from_marched(kind, gal.basis.clone(), times[is..=it].to_vec(), marched, cfg.picard_tol))
}

/// `Q^N`: backward equations driven by `f^N` through the `delta` kernel.
pub struct QnSolver {
    gal: Galerkin,
    ops: PairOps,
    times: Vec<f64>,
    fp_at_x: Vec<Vec<f64>>,
    fm_at_y: Vec<Vec<f64>>,
    factor: f64,
    cfg: SolverConfig,
}

impl QnSolver {
    pub fn new(kernel: &AnnihilationKernel, f_n: &FieldPair, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        if f_n.basis.d != kernel.d {
            return Err(invalid("kernel and field dimensions differ"));
        }
        let gal = Galerkin::new(kernel.d, f_n.basis.kmax);
        let ops = PairOps::new(&gal.basis, PairNodes::build(kernel, &cfg.pair_options(kernel, gal.basis.kmax))?);
        let fp_at_x = f_n.plus.iter().map(|c| ops.values(Species::Plus, c)).collect();
        let fm_at_y = f_n.minus.iter().map(|c| ops.values(Species::Minus, c)).collect();
        Ok(QnSolver {
            gal,
            ops,
            times: f_n.times.clone(),
            fp_at_x,
            fm_at_y,
            factor: cfg.prefactor.value(),
            cfg: cfg.clone(),
        })
    }

    pub fn ops(&self) -> &PairOps {
        &self.ops
    }

    /// `f+` and `f-` at the pair nodes at grid node `i`.
    pub fn background(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.fp_at_x[i], &self.fm_at_y[i])
    }
}

impl BackwardEvolution for QnSolver {
    fn galerkin(&self) -> &Galerkin {
        &self.gal
    }

    fn times(&self) -> &[f64] {
        &self.times
    }

    fn solve_nodes(&self, is: usize, it: usize, terminal: Vec<f64>) -> Result<FieldPair> {
        let m = self.gal.len();
        let ops = &self.ops;
        let mut source = |i: usize, c: &[f64]| -> Result<Vec<f64>> {
            let mut s = vec![0.0; 2 * m];
            if ops.is_empty() {
                return Ok(s);
            }
            let vp = ops.values(Species::Plus, &c[..m]);
            let vm = ops.values(Species::Minus, &c[m..]);
            let w = ops.weights();
            let (fp, fm) = (&self.fp_at_x[i], &self.fm_at_y[i]);
            let sum: Vec<f64> = vp.iter().zip(&vm).map(|(a, b)| a + b).collect();
            let gp: Vec<f64> = (0..w.len()).map(|q| -self.factor * w[q] * fm[q] * sum[q]).collect();
            let gm: Vec<f64> = (0..w.len()).map(|q| -self.factor * w[q] * fp[q] * sum[q]).collect();
            let (sp, sm) = s.split_at_mut(m);
            ops.project(Species::Plus, &gp, sp);
            ops.project(Species::Minus, &gm, sm);
            Ok(s)
        };
        march_backward(&self.gal, &self.times, is, it, terminal, &self.cfg, "Q_N", &mut source)
    }
}

/// `Q`: backward equations coupled through the interface by the hydrodynamic pair.
pub struct QSolver {
    gal: Galerkin,
    times: Vec<f64>,
    up_at_i: Vec<Vec<f64>>,
    um_at_i: Vec<Vec<f64>>,
    lambda_eff: f64,
    factor: f64,
    cfg: SolverConfig,
}

impl QSolver {
    pub fn new(u: &FieldPair, lambda_eff: f64, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let gal = Galerkin::new(u.basis.d, u.basis.kmax);
        let up_at_i = u.plus.iter().map(|c| gal.interface_values(c)).collect();
        let um_at_i = u.minus.iter().map(|c| gal.interface_values(c)).collect();
        Ok(QSolver {
            gal,
            times: u.times.clone(),
            up_at_i,
            um_at_i,
            lambda_eff,
            factor: cfg.prefactor.value(),
            cfg: cfg.clone(),
        })
    }
}

impl BackwardEvolution for QSolver {
    fn galerkin(&self) -> &Galerkin {
        &self.gal
    }

    fn times(&self) -> &[f64] {
        &self.times
    }

    fn solve_nodes(&self, is: usize, it: usize, terminal: Vec<f64>) -> Result<FieldPair> {
        let m = self.gal.len();
        let gal = &self.gal;
        let scale = -self.factor * self.lambda_eff;
        let mut source = |i: usize, c: &[f64]| -> Result<Vec<f64>> {
            let mut s = vec![0.0; 2 * m];
            if scale == 0.0 {
                return Ok(s);
            }
            let vp = gal.interface_values(&c[..m]);
            let vm = gal.interface_values(&c[m..]);
            let sum: Vec<f64> = vp.iter().zip(&vm).map(|(a, b)| a + b).collect();
            let gp: Vec<f64> = sum.iter().zip(&self.um_at_i[i]).map(|(a, b)| a * b).collect();
            let gm: Vec<f64> = sum.iter().zip(&self.up_at_i[i]).map(|(a, b)| a * b).collect();
            gal.interface_project(&gp, scale, &mut s[..m]);
            gal.interface_project(&gm, scale, &mut s[m..]);
            Ok(s)
        };
        march_backward(&self.gal, &self.times, is, it, terminal, &self.cfg, "Q", &mut source)
    }
}

/// `Q^N_{s,t}(terminal)` with the backward solver built on the fly.
pub fn solve_qn(
    kernel: &AnnihilationKernel,
    f_n: &FieldPair,
    s: f64,
    t: f64,
    terminal: &ObservablePair,
    cfg: &SolverConfig,
) -> Result<FieldPair> {
    QnSolver::new(kernel, f_n, cfg)?.solve(s, t, terminal)
}

/// `Q_{s,t}(terminal)` for the hydrodynamic pair `u`.
pub fn solve_q(
    u: &FieldPair,
    lambda_eff: f64,
    s: f64,
    t: f64,
    terminal: &ObservablePair,
    cfg: &SolverConfig,
) -> Result<FieldPair> {
    QSolver::new(u, lambda_eff, cfg)?.solve(s, t, terminal)
}

/// Functionals that `U_{(t,s)}` acts on.
#[derive(Clone, Debug)]
pub enum Functional {
    /// Pairings with the eigenmodes, box-local coordinates as in [`DualVector`].
    Dual(DualVector),
    /// Weighted point masses in physical coordinates.
    Points { plus: Vec<(Vec<f64>, f64)>, minus: Vec<(Vec<f64>, f64)> },
    /// Coefficient pairings in the solver's reference basis.
    Reference { plus: Vec<f64>, minus: Vec<f64> },
}

impl Functional {
    /// `mu(v)` for a pair of reference-basis coefficient vectors.
    pub fn apply(&self, basis: &Basis, vp: &[f64], vm: &[f64]) -> Result<f64> {
        match self {
            Functional::Dual(mu) => {
                if mu.basis.d != basis.d {
                    return Err(invalid("functional dimension mismatch"));
                }
                let d = basis.d;
                let mut total = 0.0;
                for (idx, (&a, &b)) in mu.plus.iter().zip(&mu.minus).enumerate() {
                    let k = mu.basis.multi_index(idx);
                    if k.iter().any(|&ki| ki > basis.kmax) {
                        continue;
                    }
                    let j = basis.flat_index(&k);
                    // Box-local modes on D- differ from reference modes by (-1)^{k_d}.
                    let sign = if k[d - 1] % 2 == 1 { -1.0 } else { 1.0 };
                    total += a * vp[j] + sign * b * vm[j];
                }
                Ok(total)
            }
            Functional::Points { plus, minus } => {
                let mut total = 0.0;
                for (x, w) in plus {
                    total += w * basis.eval(vp, &crate::geometry::to_reference(Species::Plus, x));
                }
                for (y, w) in minus {
                    total += w * basis.eval(vm, &crate::geometry::to_reference(Species::Minus, y));
                }
                Ok(total)
            }
            Functional::Reference { plus, minus } => {
                if plus.len() != vp.len() || minus.len() != vm.len() {
                    return Err(invalid("reference functional has the wrong length"));
                }
                Ok(plus.iter().zip(vp).map(|(a, b)| a * b).sum::<f64>()
                    + minus.iter().zip(vm).map(|(a, b)| a * b).sum::<f64>())
            }
        }
    }
}

/// Which evolution `U` is built from.
pub enum Which<'a> {
    FiniteN(&'a QnSolver),
    Limit(&'a QSolver),
}

impl Which<'_> {
    fn evolution(&self) -> &dyn BackwardEvolution {
        match self {
            Which::FiniteN(q) => *q,
            Which::Limit(q) => *q,
        }
    }
}

/// `<U_{(t,s)} mu, terminal> = mu(Q_{s,t} terminal)`.
pub fn act_u(mu: &Functional, s: f64, t: f64, terminal: &ObservablePair, which: &Which) -> Result<f64> {
    let ev = which.evolution();
    let v = ev.solve(s, t, terminal)?;
    mu.apply(&ev.galerkin().basis, &v.plus[0], &v.minus[0])
}

/// `U_{(u,s)} mu` as a reference-basis functional, one backward solve per mode.
pub fn transport(mu: &Functional, s: f64, u: f64, which: &Which) -> Result<Functional> {
    let ev = which.evolution();
    let is = index_of(ev.times(), s)?;
    let iu = index_of(ev.times(), u)?;
    let m = ev.galerkin().len();
    let basis = &ev.galerkin().basis;
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for slot in 0..2 * m {
        let mut terminal = vec![0.0; 2 * m];
        terminal[slot] = 1.0;
        let v = ev.solve_nodes(is, iu, terminal)?;
        let val = mu.apply(basis, &v.plus[0], &v.minus[0])?;
        if slot < m {
            plus[slot] = val;
        } else {
            minus[slot - m] = val;
        }
    }
    Ok(Functional::Reference { plus, minus })
}

/// Spatial pieces of the quadratic-variation integrand at one time.
struct QvParts {
    // Per species: gradient components at the box nodes.
    grad: [Vec<Vec<f64>>; 2],
    // Per species: values at the interface nodes (limit) or pair nodes (finite N).
    coupled: [Vec<f64>; 2],
}

/// Background for the quadratic-variation integrand: the density pair seen by the noise.
pub enum NoiseBackground<'a> {
    /// `∫_I lambda_eff (a+ + a-)(b+ + b-) u+ u- dσ` interface term.
    Limit { u: &'a FieldPair, lambda_eff: f64 },
    /// `∫∫ ell (a+(x) + a-(y))(b+(x) + b-(y)) f+(x) f-(y)` pair term.
    FiniteN { f_n: &'a FieldPair, kernel: &'a AnnihilationKernel },
}

/// Evaluates `q(a, b)(r)` for coefficient pairs on the solver grid.
pub struct QvEngine {
    gal: Galerkin,
    grid_w: Vec<f64>,
    times: Vec<f64>,
    dens_grid: [Vec<Vec<f64>>; 2],
    // Interface or pair node product weights `w * lambda * f+ f-` per time.
    coupling_w: Vec<Vec<f64>>,
    ops: Option<PairOps>,
    lambda: f64,
}

impl QvEngine {
    pub fn new(bg: &NoiseBackground, cfg: &SolverConfig) -> Result<Self> {
        let field = match bg {
            NoiseBackground::Limit { u, .. } => *u,
            NoiseBackground::FiniteN { f_n, .. } => *f_n,
        };
        let gal = Galerkin::new(field.basis.d, field.basis.kmax);
        let grid_w = gal.grid_weights();
        let dens_grid = [
            field.plus.iter().map(|c| gal.grid_values(c)).collect(),
            field.minus.iter().map(|c| gal.grid_values(c)).collect(),
        ];
        let lambda = match bg {
            NoiseBackground::Limit { lambda_eff, .. } => *lambda_eff,
            NoiseBackground::FiniteN { .. } => 1.0,
        };
        let (coupling_w, ops) = match bg {
            NoiseBackground::Limit { u, lambda_eff } => {
                let w = gal.interface_weights();
                let cw = (0..u.times.len())
                    .map(|i| {
                        let a = gal.interface_values(&u.plus[i]);
                        let b = gal.interface_values(&u.minus[i]);
                        (0..a.len()).map(|q| lambda_eff * w[q] * a[q] * b[q]).collect()
                    })
                    .collect();
                (cw, None)
            }
            NoiseBackground::FiniteN { f_n, kernel } => {
                let ops = PairOps::new(
                    &gal.basis,
                    PairNodes::build(kernel, &cfg.pair_options(kernel, gal.basis.kmax))?,
                );
                let cw = (0..f_n.times.len())
                    .map(|i| {
                        let a = ops.values(Species::Plus, &f_n.plus[i]);
                        let b = ops.values(Species::Minus, &f_n.minus[i]);
                        (0..a.len()).map(|q| ops.weights()[q] * a[q] * b[q]).collect()
                    })
                    .collect();
                (cw, Some(ops))
            }
        };
        Ok(QvEngine { gal, grid_w, times: field.times.clone(), dens_grid, coupling_w, ops, lambda })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn galerkin(&self) -> &Galerkin {
        &self.gal
    }

    fn parts(&self, vp: &[f64], vm: &[f64]) -> QvParts {
        let grad = [self.gal.grid_gradient(vp), self.gal.grid_gradient(vm)];
        let coupled = match &self.ops {
            None => {
                let a = self.gal.interface_values(vp);
                let b = self.gal.interface_values(vm);
                [a, b]
            }
            Some(ops) => [ops.values(Species::Plus, vp), ops.values(Species::Minus, vm)],
        };
        QvParts { grad, coupled }
    }

    fn q_of(&self, i: usize, a: &QvParts, b: &QvParts) -> f64 {
        let mut total = 0.0;
        for s in 0..2 {
            let dens = &self.dens_grid[s][i];
            for (ga, gb) in a.grad[s].iter().zip(&b.grad[s]) {
                for q in 0..dens.len() {
                    total += self.grid_w[q] * dens[q] * ga[q] * gb[q];
                }
            }
        }
        let cw = &self.coupling_w[i];
        for q in 0..cw.len() {
            total += cw[q] * (a.coupled[0][q] + a.coupled[1][q]) * (b.coupled[0][q] + b.coupled[1][q]);
        }
        total
    }

    /// `q(a, b)` at grid node `i` for fixed coefficient pairs.
    pub fn q(&self, i: usize, a: (&[f64], &[f64]), b: (&[f64], &[f64])) -> f64 {
        let pa = self.parts(a.0, a.1);
        let pb = self.parts(b.0, b.1);
        self.q_of(i, &pa, &pb)
    }

    /// `∫_0^t q(phi, psi)(r) dr` for fixed test functions. Every step carries 4 Gauss nodes
    /// evaluated through the dense output of `field`, the background this engine was built on.
    pub fn integrate_fixed(
        &self,
        field: &FieldPair,
        phi: &ObservablePair,
        psi: &ObservablePair,
        t: f64,
        nodes_per_step: usize,
    ) -> Result<f64> {
        let it = index_of(&self.times, t)?;
        let pa = self.parts(&self.gal.project(&phi.plus), &self.gal.project(&phi.minus));
        let pb = self.parts(&self.gal.project(&psi.plus), &self.gal.project(&psi.minus));
        let (gn, gw) = crate::quadrature::gauss_legendre(nodes_per_step);
        let mut total = 0.0;
        for j in 0..it {
            let h = self.times[j + 1] - self.times[j];
            for (z, w) in gn.iter().zip(&gw) {
                let tau = 0.5 * h * (z + 1.0);
                let up = field.dense(Species::Plus, j, tau);
                let um = field.dense(Species::Minus, j, tau);
                total += 0.5 * h * w * self.q_dense(&up, &um, &pa, &pb);
            }
        }
        Ok(total)
    }

    fn q_dense(&self, up: &[f64], um: &[f64], a: &QvParts, b: &QvParts) -> f64 {
        let dens = [self.gal.grid_values(up), self.gal.grid_values(um)];
        let mut total = 0.0;
        for s in 0..2 {
            for (ga, gb) in a.grad[s].iter().zip(&b.grad[s]) {
                for q in 0..dens[s].len() {
                    total += self.grid_w[q] * dens[s][q] * ga[q] * gb[q];
                }
            }
        }
        let (fa, fb, w): (Vec<f64>, Vec<f64>, Vec<f64>) = match &self.ops {
            None => (self.gal.interface_values(up), self.gal.interface_values(um), self.gal.interface_weights()),
            Some(ops) => (ops.values(Species::Plus, up), ops.values(Species::Minus, um), ops.weights().to_vec()),
        };
        for q in 0..fa.len() {
            total += self.lambda
                * w[q]
                * fa[q]
                * fb[q]
                * (a.coupled[0][q] + a.coupled[1][q])
                * (b.coupled[0][q] + b.coupled[1][q]);
        }
        total
    }
}

/// `∫_0^t [<∇phi+·∇psi+, u+> + <∇phi-·∇psi-, u-> + lambda_eff ∫_I (phi+ + phi-)(psi+ + psi-) u+ u- dσ] ds`.
pub fn mart_cov(
    u: &FieldPair,
    phi: &ObservablePair,
    psi: &ObservablePair,
    lambda_eff: f64,
    t: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let engine = QvEngine::new(&NoiseBackground::Limit { u, lambda_eff }, cfg)?;
    engine.integrate_fixed(u, phi, psi, t, 4)
}

/// Covariances `Cov(Z_s(phi), Z_t(psi))` of the generalized Ornstein-Uhlenbeck limit:
/// `Cov0(Q_{0,s} phi, Q_{0,t} psi) + ∫_0^{s∧t} q(Q_{r,s} phi, Q_{r,t} psi)(r) dr`.
pub struct OuCov<'a> {
    qv: QvEngine,
    evolution: &'a dyn BackwardEvolution,
    u0_grid: [Vec<f64>; 2],
}

/// One backward-transported observable, preprocessed for covariance sums.
pub struct Transported {
    pub s: f64,
    // Node index of `s` and per-node parts for nodes 0..=is.
    is: usize,
    parts: Vec<QvParts>,
    at_zero: [Vec<f64>; 2],
}

impl<'a> OuCov<'a> {
    pub fn new(
        background: &NoiseBackground,
        evolution: &'a dyn BackwardEvolution,
        u0: &ObservablePair,
        cfg: &SolverConfig,
    ) -> Result<Self> {
        let qv = QvEngine::new(background, cfg)?;
        if qv.gal.basis != evolution.galerkin().basis || qv.times != evolution.times() {
            return Err(invalid("noise background and evolution use different grids"));
        }
        let d = qv.gal.d();
        let u0_grid = [grid_samples(&qv.gal, &u0.plus, d), grid_samples(&qv.gal, &u0.minus, d)];
        Ok(OuCov { qv, evolution, u0_grid })
    }

    pub fn transport(&self, phi: &ObservablePair, s: f64) -> Result<Transported> {
        let is = index_of(&self.qv.times, s)?;
        let v = self.evolution.solve_nodes(0, is, project_pair(&self.qv.gal, phi))?;
        let parts = (0..=is).map(|i| self.qv.parts(&v.plus[i], &v.minus[i])).collect();
        let at_zero = [self.qv.gal.grid_values(&v.plus[0]), self.qv.gal.grid_values(&v.minus[0])];
        Ok(Transported { s, is, parts, at_zero })
    }

    /// Covariance of two transported observables.
    pub fn cov_of(&self, a: &Transported, b: &Transported) -> f64 {
        let w = &self.qv.grid_w;
        let mut c0 = 0.0;
        for s in 0..2 {
            let u0 = &self.u0_grid[s];
            let (mut ab, mut ea, mut eb) = (0.0, 0.0, 0.0);
            for q in 0..w.len() {
                let wu = w[q] * u0[q];
                ab += wu * a.at_zero[s][q] * b.at_zero[s][q];
                ea += wu * a.at_zero[s][q];
                eb += wu * b.at_zero[s][q];
            }
            c0 += ab - ea * eb;
        }
        let top = a.is.min(b.is);
        let mut integral = 0.0;
        let mut prev = self.qv.q_of(0, &a.parts[0], &b.parts[0]);
        for i in 1..=top {
            let cur = self.qv.q_of(i, &a.parts[i], &b.parts[i]);
            integral += 0.5 * (self.qv.times[i] - self.qv.times[i - 1]) * (prev + cur);
            prev = cur;
        }
        c0 + integral
    }

    pub fn cov(&self, phi: &ObservablePair, s: f64, psi: &ObservablePair, t: f64) -> Result<f64> {
        let a = self.transport(phi, s)?;
        let b = self.transport(psi, t)?;
        Ok(self.cov_of(&a, &b))
    }

    /// Symmetric Gram matrix (row-major) over `(observable, time)` items.
    pub fn gram(&self, items: &[(ObservablePair, f64)]) -> Result<Vec<f64>> {
        let tr: Vec<Transported> = items.iter().map(|(p, s)| self.transport(p, *s)).collect::<Result<_>>()?;
        let n = tr.len();
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = self.cov_of(&tr[i], &tr[j]);
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        Ok(g)
    }
}

fn grid_samples(gal: &Galerkin, f: &TestFunction, d: usize) -> Vec<f64> {
    let panels = (3 * (gal.basis.kmax + 1)).div_ceil(8) + 2;
    let (nodes, _) = composite_gauss(panels, 8, 0.0, 1.0);
    let n = nodes.len();
    let mut x = vec![0.0; d];
    (0..n.pow(d as u32))
        .map(|idx| {
            let mut r = idx;
            for a in (0..d).rev() {
                x[a] = nodes[r % n];
                r /= n;
            }
            f.value(&x)
        })
        .collect()
}

