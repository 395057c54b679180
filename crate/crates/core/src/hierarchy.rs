//! Second-order terms of the correlation functions: the pair fields `G`, `G+`, `G-`, the
//! one-point corrections `g+`, `g-`, and the expansion `F = A + B / N + ...`.
//!
//! All fields live in reference coordinates. Pair fields use the product cosine basis, stored as
//! `m x m` row-major coefficient blocks with the first argument on the rows. With pair-quadrature
//! tables `Tp`, `Tm` and node weights `w` (which carry `ell`), every coupling term is a product
//! of the blocks with one of
//!
//! - `Ma+ = Tp' diag(w f-) Tp`, `Ma- = Tm' diag(w f+) Tm` (killing rates),
//! - `Nm = Tp' diag(w f-) Tm`, `Pm = Tp' diag(w f+) Tm` (transfer through `ell`),
//! - `S = Tp' diag(w f+ f-) Tm` (the pair source).

use serde::Serialize;

use crate::annihilation::{AnnihilationKernel, PairNodes};
use crate::error::{invalid, Error, Result};
use crate::geometry::Species;
use crate::linalg::{gemm, gemv, tensor_apply};
use crate::observable::TestFunction;
use crate::quadrature::composite_gauss;
use crate::sim::ProductTest;
use crate::solvers::{march, steps_of, FieldPair, Galerkin, PairOps, SolveStats, SolverConfig};
use crate::spectral::{mode_1d, Basis};
use crate::stats::Estimate;

/// `G` on `D+ x D-`, `G+` on `D+ x D+`, `G-` on `D- x D-`, as product-basis coefficients per time node.
#[derive(Clone, Debug)]
pub struct PairFieldTriple {
    pub basis: Basis,
    pub times: Vec<f64>,
    pub g: Vec<Vec<f64>>,
    pub g_plus: Vec<Vec<f64>>,
    pub g_minus: Vec<Vec<f64>>,
    pub stats: SolveStats,
}

/// Coupling blocks at one time node.
struct Blocks {
    ma_plus: Vec<f64>,
    ma_minus: Vec<f64>,
    nm: Vec<f64>,
    pm: Vec<f64>,
    src: Vec<f64>,
}

/// `a' diag(w) b` for `q x m` tables.
fn weighted_gram(a: &[f64], b: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut scaled = b.to_vec();
    for (q, &wq) in w.iter().enumerate() {
        for v in &mut scaled[q * m..(q + 1) * m] {
            *v *= wq;
        }
    }
    let mut out = vec![0.0; m * m];
    gemm(m, w.len(), m, 1.0, a, true, &scaled, false, 0.0, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn mat(m: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, alpha: f64, beta: f64, out: &mut [f64]) {
    gemm(m, m, m, alpha, a, ta, b, tb, beta, out);
}

/// `out = -(y + y')`.
fn neg_sym(y: &[f64], m: usize, out: &mut [f64]) {
    for k in 0..m {
        for l in 0..m {
            out[k * m + l] = -(y[k * m + l] + y[l * m + k]);
        }
    }
}

/// Joint Picard solution of the five coupled equations on the time grid of `f_n`.
pub fn solve_hierarchy(
    kernel: &AnnihilationKernel,
    f_n: &FieldPair,
    cfg: &SolverConfig,
) -> Result<(PairFieldTriple, FieldPair)> {
    cfg.validate()?;
    let d = kernel.d;
    if f_n.basis.d != d {
        return Err(invalid("kernel and field dimensions differ"));
    }
    let basis = Basis::new(d, cfg.hierarchy_kmax(kernel));
    let m = basis.len();
    let mm = m * m;
    let nodes = PairNodes::build(kernel, &cfg.pair_options(kernel, basis.kmax))?;
    let ops = PairOps::new(&basis, nodes.clone());
    let fops = PairOps::new(&f_n.basis, nodes);
    let nq = ops.len();
    let (tp, tm) = (ops.table(Species::Plus), ops.table(Species::Minus));
    let w = ops.weights();

    let lam = basis.lambdas();
    let mut decay = Vec::with_capacity(3 * mm + 2 * m);
    for _ in 0..3 {
        for k in 0..m {
            for l in 0..m {
                decay.push(lam[k] + lam[l]);
            }
        }
    }
    decay.extend_from_slice(lam);
    decay.extend_from_slice(lam);
    let sw = std::f64::consts::SQRT_2.powi(d as i32);
    let mut weight = vec![sw * sw; 3 * mm];
    weight.extend(vec![sw; 2 * m]);

    let mut cache: Option<(usize, Blocks)> = None;
    let mut y = vec![0.0; mm];
    let mut tpg = vec![0.0; nq * m];
    let mut source = |i: usize, c: &[f64]| -> Result<Vec<f64>> {
        let mut s = vec![0.0; 3 * mm + 2 * m];
        if nq == 0 {
            return Ok(s);
        }
        if cache.as_ref().map(|e| e.0) != Some(i) {
            let fp = fops.values(Species::Plus, &f_n.plus[i]);
            let fm = fops.values(Species::Minus, &f_n.minus[i]);
            let w_fm: Vec<f64> = (0..nq).map(|q| w[q] * fm[q]).collect();
            let w_fp: Vec<f64> = (0..nq).map(|q| w[q] * fp[q]).collect();
            let w_ff: Vec<f64> = (0..nq).map(|q| w[q] * fp[q] * fm[q]).collect();
            let b = Blocks {
                ma_plus: weighted_gram(tp, tp, &w_fm, m),
                ma_minus: weighted_gram(tm, tm, &w_fp, m),
                nm: weighted_gram(tp, tm, &w_fm, m),
                pm: weighted_gram(tp, tm, &w_fp, m),
                src: weighted_gram(tp, tm, &w_ff, m),
            };
            cache = Some((i, b));
        }
        let b = &cache.as_ref().expect("filled above").1;
        let (g, rest) = c.split_at(mm);
        let (gp, rest) = rest.split_at(mm);
        let (gm, rest) = rest.split_at(mm);
        let (sp, sm) = rest.split_at(m);
        let (s_g, s_rest) = s.split_at_mut(mm);
        let (s_gp, s_rest) = s_rest.split_at_mut(mm);
        let (s_gm, s_small) = s_rest.split_at_mut(mm);
        let (s_sp, s_sm) = s_small.split_at_mut(m);

        // G: S - Ma+ G - G Ma- - G+ Nm - Pm G-.
        s_g.copy_from_slice(&b.src);
        mat(m, &b.ma_plus, false, g, false, -1.0, 1.0, s_g);
        mat(m, g, false, &b.ma_minus, false, -1.0, 1.0, s_g);
        mat(m, gp, false, &b.nm, false, -1.0, 1.0, s_g);
        mat(m, &b.pm, false, gm, false, -1.0, 1.0, s_g);
        // G+: -(Y + Y') with Y = Ma+ G+ + Pm G'.
        mat(m, &b.ma_plus, false, gp, false, 1.0, 0.0, &mut y);
        mat(m, &b.pm, false, g, true, 1.0, 1.0, &mut y);
        neg_sym(&y, m, s_gp);
        // G-: -(Z + Z') with Z = Ma- G- + Nm' G.
        mat(m, &b.ma_minus, false, gm, false, 1.0, 0.0, &mut y);
        mat(m, &b.nm, true, g, false, 1.0, 1.0, &mut y);
        neg_sym(&y, m, s_gm);

        // G on the zone diagonal, then h+- = T' (w G).
        gemm(nq, m, m, 1.0, tp, false, g, false, 0.0, &mut tpg);
        let wg: Vec<f64> =
            (0..nq).map(|q| w[q] * tpg[q * m..(q + 1) * m].iter().zip(&tm[q * m..(q + 1) * m]).map(|(a, b)| a * b).sum::<f64>()).collect();
        gemv(nq, m, tp, true, &wg, s_sp, 0.0);
        gemv(nq, m, tm, true, &wg, s_sm, 0.0);
        gemv(m, m, &b.ma_plus, false, sp, s_sp, 1.0);
        gemv(m, m, &b.pm, false, sm, s_sp, 1.0);
        gemv(m, m, &b.ma_minus, false, sm, s_sm, 1.0);
        gemv(m, m, &b.nm, true, sp, s_sm, 1.0);
        for v in s_sp.iter_mut().chain(s_sm.iter_mut()) {
            *v = -*v;
        }
        Ok(s)
    };
    let marched = march(&decay, &steps_of(&f_n.times), vec![0.0; 3 * mm + 2 * m], &weight, cfg, &mut source)?;

    let mut triple = PairFieldTriple {
        basis: basis.clone(),
        times: f_n.times.clone(),
        g: vec![],
        g_plus: vec![],
        g_minus: vec![],
        stats: marched.stats.clone(),
    };
    let mut small = FieldPair {
        kind: "g".into(),
        basis,
        times: f_n.times.clone(),
        plus: vec![],
        minus: vec![],
        src_plus: vec![],
        src_minus: vec![],
        stats: marched.stats,
        tol: cfg.picard_tol,
    };
    for (c, src) in marched.states.iter().zip(&marched.sources) {
        triple.g.push(c[..mm].to_vec());
        triple.g_plus.push(c[mm..2 * mm].to_vec());
        triple.g_minus.push(c[2 * mm..3 * mm].to_vec());
        small.plus.push(c[3 * mm..3 * mm + m].to_vec());
        small.minus.push(c[3 * mm + m..].to_vec());
        small.src_plus.push(src[3 * mm..3 * mm + m].to_vec());
        small.src_minus.push(src[3 * mm + m..].to_vec());
    }
    Ok((triple, small))
}

/// Which of the three pair fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairField {
    Cross,
    Plus,
    Minus,
}

impl PairFieldTriple {
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let scale = self.times.last().copied().unwrap_or(1.0).max(1e-300);
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-10 * scale)
            .ok_or_else(|| invalid(format!("time {t} is not a node of the hierarchy grid")))
    }

    pub fn block(&self, which: PairField, idx: usize) -> &[f64] {
        match which {
            PairField::Cross => &self.g[idx],
            PairField::Plus => &self.g_plus[idx],
            PairField::Minus => &self.g_minus[idx],
        }
    }

    /// Value at a pair of reference points.
    pub fn eval(&self, which: PairField, idx: usize, a: &[f64], b: &[f64]) -> f64 {
        let m = self.basis.len();
        let pa = self.basis.mode_values(a);
        let pb = self.basis.mode_values(b);
        let mut tmp = vec![0.0; m];
        gemv(m, m, self.block(which, idx), false, &pb, &mut tmp, 0.0);
        pa.iter().zip(&tmp).map(|(u, v)| u * v).sum()
    }

    /// `∫∫ a(x) b(y) F(x, y)` for coefficient vectors `a`, `b` in this basis.
    pub fn pairing(&self, which: PairField, idx: usize, a: &[f64], b: &[f64]) -> f64 {
        let m = self.basis.len();
        let mut tmp = vec![0.0; m];
        gemv(m, m, self.block(which, idx), false, b, &mut tmp, 0.0);
        a.iter().zip(&tmp).map(|(u, v)| u * v).sum()
    }

    /// Largest asymmetry `|F(a, b) - F(b, a)|` of the `G+` and `G-` blocks.
    pub fn asymmetry(&self) -> f64 {
        let m = self.basis.len();
        let mut worst: f64 = 0.0;
        for blk in self.g_plus.iter().chain(&self.g_minus) {
            for k in 0..m {
                for l in 0..k {
                    worst = worst.max((blk[k * m + l] - blk[l * m + k]).abs());
                }
            }
        }
        worst
    }

    fn gauss_table(&self) -> (Vec<f64>, Vec<f64>, usize) {
        let nk = self.basis.kmax + 1;
        let (x, w) = composite_gauss(nk.div_ceil(4) + 2, 8, 0.0, 1.0);
        let n = x.len();
        let mut tab = vec![0.0; n * nk];
        for (q, &z) in x.iter().enumerate() {
            for k in 0..nk {
                tab[q * nk + k] = mode_1d(k, z);
            }
        }
        (tab, w, n)
    }

    /// Values of one block on the product Gauss grid, with the matching weights.
    pub fn grid(&self, which: PairField, idx: usize) -> (Vec<f64>, Vec<f64>) {
        let d = self.basis.d;
        let nk = self.basis.kmax + 1;
        let (tab, w1, n) = self.gauss_table();
        let mats: Vec<&[f64]> = vec![&tab; 2 * d];
        let vals = tensor_apply(self.block(which, idx), &vec![nk; 2 * d], &mats, &vec![n; 2 * d]);
        (vals, tensor_weights(&w1, 2 * d))
    }

    /// `(min, max)` of one block on the product Gauss grid.
    pub fn extrema(&self, which: PairField, idx: usize) -> (f64, f64) {
        let (v, _) = self.grid(which, idx);
        v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }

    /// `∫∫ |G_t|`.
    pub fn abs_integral(&self, which: PairField, idx: usize) -> f64 {
        let (v, w) = self.grid(which, idx);
        v.iter().zip(&w).map(|(a, b)| a.abs() * b).sum()
    }

    /// `∫ ell(x~, y) |G_t(x, y)| + ∫ ell(x, y~) |G_t(x, y)|`.
    pub fn ell_abs_integral(&self, kernel: &AnnihilationKernel, cfg: &SolverConfig, idx: usize) -> Result<f64> {
        let d = self.basis.d;
        if kernel.d != d {
            return Err(invalid("kernel and field dimensions differ"));
        }
        let nodes = PairNodes::build(kernel, &cfg.pair_options(kernel, self.basis.kmax))?;
        let m = self.basis.len();
        let nk = self.basis.kmax + 1;
        let (tab, w1, n) = self.gauss_table();
        let mats: Vec<&[f64]> = vec![&tab; d];
        let wd = tensor_weights(&w1, d);
        let blk = self.block(PairField::Cross, idx);
        let mut v = vec![0.0; m];
        let mut total = 0.0;
        for q in 0..nodes.len() {
            // First term: the free plus point meets the node's minus point, and vice versa.
            for (pt, trans) in [(nodes.y_at(q), false), (nodes.x_at(q), true)] {
                let modes = self.basis.mode_values(pt);
                gemv(m, m, blk, trans, &modes, &mut v, 0.0);
                let vals = tensor_apply(&v, &vec![nk; d], &mats, &vec![n; d]);
                total += nodes.w[q] * vals.iter().zip(&wd).map(|(a, b)| a.abs() * b).sum::<f64>();
            }
        }
        Ok(total)
    }
}

fn tensor_weights(w1: &[f64], dims: usize) -> Vec<f64> {
    let mut out = vec![1.0];
    for _ in 0..dims {
        out = out.iter().flat_map(|&o| w1.iter().map(move |&w| o * w)).collect();
    }
    out
}

/// `A` and `B` of the expansion at a list of tuples.
#[derive(Clone, Debug, Serialize)]
pub struct ExpansionTerms {
    pub n: usize,
    pub m: usize,
    pub t: f64,
    /// Each row holds the `n` plus points, then the `m` minus points, in reference coordinates.
    pub points: Vec<Vec<Vec<f64>>>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ExpansionTerms {
    pub fn to_csv(&self) -> String {
        let d = self.points.first().and_then(|p| p.first()).map_or(0, |x| x.len());
        let mut out = String::new();
        let mut cols = vec![];
        for i in 0..self.n {
            for a in 0..d {
                cols.push(format!("x{i}_{a}"));
            }
        }
        for j in 0..self.m {
            for a in 0..d {
                cols.push(format!("y{j}_{a}"));
            }
        }
        cols.extend(["A".to_string(), "B".to_string()]);
        out.push_str(&cols.join(","));
        out.push('\n');
        for (p, (a, b)) in self.points.iter().zip(self.a.iter().zip(&self.b)) {
            let mut row: Vec<String> = p.iter().flatten().map(|v| format!("{v:.12e}")).collect();
            row.push(format!("{a:.12e}"));
            row.push(format!("{b:.12e}"));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// The one- and two-point ingredients of `A` and `B`, either as values at points or as pairings.
struct Ingredients {
    f_plus: Vec<f64>,
    f_minus: Vec<f64>,
    g_plus: Vec<f64>,
    g_minus: Vec<f64>,
    // [i][j] for G, [i][p] for G+, [j][q] for G-.
    cross: Vec<Vec<f64>>,
    pp: Vec<Vec<f64>>,
    mm: Vec<Vec<f64>>,
}

fn product_except(v: &[f64], skip: &[usize]) -> f64 {
    v.iter().enumerate().filter(|(i, _)| !skip.contains(i)).map(|(_, x)| x).product()
}

/// `(A, B)` with `B` in the cancelled form: each term multiplies the factors it does not divide.
fn combine(ing: &Ingredients) -> (f64, f64) {
    let (fp, fm) = (&ing.f_plus, &ing.f_minus);
    let (n, m) = (fp.len(), fm.len());
    let a = product_except(fp, &[]) * product_except(fm, &[]);
    let mut b = 0.0;
    for i in 0..n {
        b += ing.g_plus[i] * product_except(fp, &[i]) * product_except(fm, &[]);
    }
    for j in 0..m {
        b += ing.g_minus[j] * product_except(fp, &[]) * product_except(fm, &[j]);
    }
    for i in 0..n {
        for j in 0..m {
            b += ing.cross[i][j] * product_except(fp, &[i]) * product_except(fm, &[j]);
        }
    }
    for i in 0..n {
        for p in i + 1..n {
            b += ing.pp[i][p] * product_except(fp, &[i, p]) * product_except(fm, &[]);
        }
    }
    for j in 0..m {
        for q in j + 1..m {
            b += ing.mm[j][q] * product_except(fp, &[]) * product_except(fm, &[j, q]);
        }
    }
    (a, -b)
}

fn check_order(n: usize, m: usize) -> Result<()> {
    if n + m == 0 || n + m > 4 {
        return Err(invalid(format!("expansion order (n, m) = ({n}, {m}) needs 1 <= n + m <= 4")));
    }
    Ok(())
}

fn check_grids(f_n: &FieldPair, triple: &PairFieldTriple, g: &FieldPair) -> Result<()> {
    if f_n.times != triple.times || g.times != triple.times || g.basis != triple.basis {
        return Err(invalid("f_N and the hierarchy were solved on different grids"));
    }
    Ok(())
}

/// `A` and `B` at the given tuples of reference points.
pub fn expansion_terms(
    f_n: &FieldPair,
    triple: &PairFieldTriple,
    g: &FieldPair,
    n: usize,
    m: usize,
    t: f64,
    points: &[Vec<Vec<f64>>],
) -> Result<ExpansionTerms> {
    check_order(n, m)?;
    check_grids(f_n, triple, g)?;
    let idx = triple.index_of(t)?;
    let d = triple.basis.d;
    let mut out = ExpansionTerms { n, m, t, points: points.to_vec(), a: vec![], b: vec![] };
    for p in points {
        if p.len() != n + m || p.iter().any(|x| x.len() != d) {
            return Err(invalid(format!("each tuple needs {n} + {m} points of dimension {d}")));
        }
        let (xs, ys) = p.split_at(n);
        let ing = Ingredients {
            f_plus: xs.iter().map(|x| f_n.eval(Species::Plus, idx, x)).collect(),
            f_minus: ys.iter().map(|y| f_n.eval(Species::Minus, idx, y)).collect(),
            g_plus: xs.iter().map(|x| g.eval(Species::Plus, idx, x)).collect(),
            g_minus: ys.iter().map(|y| g.eval(Species::Minus, idx, y)).collect(),
            cross: xs.iter().map(|x| ys.iter().map(|y| triple.eval(PairField::Cross, idx, x, y)).collect()).collect(),
            pp: xs.iter().map(|a| xs.iter().map(|b| triple.eval(PairField::Plus, idx, a, b)).collect()).collect(),
            mm: ys.iter().map(|a| ys.iter().map(|b| triple.eval(PairField::Minus, idx, a, b)).collect()).collect(),
        };
        let (a, b) = combine(&ing);
        out.a.push(a);
        out.b.push(b);
    }
    Ok(out)
}

/// `∫ Phi A` and `∫ Phi B` for a product test function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpansionPairing {
    pub t: f64,
    pub a: f64,
    pub b: f64,
}

pub fn expansion_pairing(
    f_n: &FieldPair,
    triple: &PairFieldTriple,
    g: &FieldPair,
    test: &ProductTest,
    t: f64,
) -> Result<ExpansionPairing> {
    check_order(test.plus.len(), test.minus.len())?;
    check_grids(f_n, triple, g)?;
    let idx = triple.index_of(t)?;
    let d = triple.basis.d;
    let fgal = Galerkin::new(d, f_n.basis.kmax);
    let hgal = Galerkin::new(d, triple.basis.kmax);
    let coeffs = |fs: &[TestFunction], gal: &Galerkin| -> Result<Vec<Vec<f64>>> {
        fs.iter()
            .map(|f| {
                f.validate(d)?;
                Ok(gal.project(f))
            })
            .collect()
    };
    let (pf, mf) = (coeffs(&test.plus, &fgal)?, coeffs(&test.minus, &fgal)?);
    let (ph, mh) = (coeffs(&test.plus, &hgal)?, coeffs(&test.minus, &hgal)?);
    let pair = |w: PairField, a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter().map(|u| b.iter().map(|v| triple.pairing(w, idx, u, v)).collect()).collect()
    };
    let ing = Ingredients {
        f_plus: pf.iter().map(|c| f_n.pairing(Species::Plus, idx, c)).collect(),
        f_minus: mf.iter().map(|c| f_n.pairing(Species::Minus, idx, c)).collect(),
        g_plus: ph.iter().map(|c| g.pairing(Species::Plus, idx, c)).collect(),
        g_minus: mh.iter().map(|c| g.pairing(Species::Minus, idx, c)).collect(),
        cross: pair(PairField::Cross, &ph, &mh),
        pp: pair(PairField::Plus, &ph, &ph),
        mm: pair(PairField::Minus, &mh, &mh),
    };
    let (a, b) = combine(&ing);
    Ok(ExpansionPairing { t, a, b })
}

/// A Monte Carlo estimate of `∫ Phi F` with the configuration it came from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct McCorrelation {
    pub t: f64,
    pub n: usize,
    pub estimate: Estimate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ExpansionRow {
    /// `|∫ Phi (F - A)|` and its standard error.
    pub err_a: f64,
    pub se_a: f64,
    /// `|∫ Phi (N (F - A) - B)|` and its standard error.
    pub err_b: f64,
    pub se_b: f64,
}

impl ExpansionRow {
    pub fn b_within(&self, k: f64) -> bool {
        self.err_b <= k * self.se_b
    }
}

/// One row per test function.
pub fn compare_expansion(mc: &[McCorrelation], terms: &[ExpansionPairing], n: usize) -> Result<Vec<ExpansionRow>> {
    if mc.len() != terms.len() {
        return Err(invalid("one expansion pairing is needed per Monte Carlo estimate"));
    }
    mc.iter()
        .zip(terms)
        .map(|(e, t)| {
            if e.n != n {
                return Err(Error::Config(format!("estimate for N = {} compared at N = {n}", e.n)));
            }
            if (e.t - t.t).abs() > 1e-9 * t.t.abs().max(1.0) {
                return Err(Error::Config(format!("estimate at t = {} compared with terms at t = {}", e.t, t.t)));
            }
            let nf = n as f64;
            let diff = e.estimate.value - t.a;
            Ok(ExpansionRow {
                err_a: diff.abs(),
                se_a: e.estimate.se,
                err_b: (nf * diff - t.b).abs(),
                se_b: nf * e.estimate.se,
            })
        })
        .collect()
}
