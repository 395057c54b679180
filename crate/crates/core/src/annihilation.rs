//! The annihilation potential `ell_delta`, its Minkowski calibration and pair-kernel quadratures.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{interface_dist_sq_unchecked, DomainPair, Species, LAMBDA};
use crate::quadrature::{composite_gauss, gauss_on};

/// Value the paper states for the limit ratio, `H^{d-1}(I)`.
pub const PAPER_LIMIT_RATIO: f64 = 1.0;

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume(n: usize) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0,
        _ => unit_ball_volume(n - 2) * 2.0 * PI / n as f64,
    }
}

/// `lim_{delta -> 0} R(delta)` for the one-sided product neighbourhood of a flat unit facet.
///
/// Writing `x' = c + w/√2`, `y' = c - w/√2` turns the zone into a quarter of a `(d+1)`-ball in
/// `(w, x_d, -y_d)` over the facet, with Jacobian `2^{(d-1)/2}`.
pub fn kappa_limit(d: usize) -> f64 {
    SQRT_2.powi(d as i32 - 1) / 4.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum KernelProfile {
    /// `amplitude * 1{I^delta}`.
    Indicator,
    /// Flat up to `inner * delta`, then linear down to zero at `delta`.
    Ramp { inner: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnihilationKernel {
    pub d: usize,
    pub delta: f64,
    pub c_ball: f64,
    pub kappa: f64,
    pub lambda_hat: f64,
    pub profile: KernelProfile,
    /// `1` for the model, `0` switches annihilation off.
    pub strength: f64,
}

impl AnnihilationKernel {
    pub fn new(d: usize, delta: f64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid(format!("delta must be positive, got {delta}")));
        }
        Ok(AnnihilationKernel {
            d,
            delta,
            c_ball: unit_ball_volume(d + 1),
            kappa: kappa_limit(d),
            lambda_hat: 1.0,
            profile: KernelProfile::Indicator,
            strength: 1.0,
        })
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_profile(mut self, profile: KernelProfile) -> Result<Self> {
        if let KernelProfile::Ramp { inner } = profile {
            if !(0.0..1.0).contains(&inner) {
                return Err(invalid("ramp inner fraction must lie in [0, 1)"));
            }
        }
        self.profile = profile;
        Ok(self)
    }

    pub fn switched_off(mut self) -> Self {
        self.strength = 0.0;
        self
    }

    pub fn is_off(&self) -> bool {
        self.strength == 0.0
    }

    /// Height `lambda_hat / (c_{d+1} delta^{d+1})` on the zone.
    pub fn amplitude(&self) -> f64 {
        self.strength * self.lambda_hat / (self.c_ball * self.delta.powi(self.d as i32 + 1))
    }

    /// Interface strength of the limit equations, `kappa * lambda`.
    pub fn lambda_eff(&self) -> f64 {
        self.strength * self.kappa * LAMBDA
    }

    /// Kernel as a function of the squared interface distance.
    #[inline]
    pub fn of_dist_sq(&self, r2: f64) -> f64 {
        let d2 = self.delta * self.delta;
        if r2 >= d2 {
            return 0.0;
        }
        match self.profile {
            KernelProfile::Indicator => self.amplitude(),
            KernelProfile::Ramp { inner } => {
                let r = r2.sqrt();
                let cut = inner * self.delta;
                if r <= cut {
                    self.amplitude()
                } else {
                    self.amplitude() * (self.delta - r) / (self.delta - cut)
                }
            }
        }
    }

    pub fn ell_eval(&self, dom: &DomainPair, x: &[f64], y: &[f64]) -> Result<f64> {
        if dom.d() != self.d {
            return Err(invalid("kernel and domain dimensions differ"));
        }
        Ok(self.of_dist_sq(dom.interface_dist_sq(x, y)?))
    }

    /// Radii where the profile has a kink, below `delta`.
    fn kinks(&self) -> Vec<f64> {
        match self.profile {
            KernelProfile::Indicator => vec![],
            KernelProfile::Ramp { inner } if inner > 0.0 => vec![inner * self.delta],
            KernelProfile::Ramp { .. } => vec![],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    /// Midpoint cells per unit length along `x` and the tangential `y'` axes.
    pub cells_per_axis: usize,
    /// Gauss order of the exact-range inner integral in `y_d`.
    pub inner_order: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { cells_per_axis: 1024, inner_order: 8 }
    }
}

/// `∫∫ f(x, y) ell(x, y) dx dy` over `D+ x D-`, with `f` taking physical coordinates.
///
/// Midpoint cells cover `x` and `y'`; the `y_d` integral runs over the exact section of the zone.
pub fn pair_kernel_integral(
    kernel: &AnnihilationKernel,
    f: &dyn Fn(&[f64], &[f64]) -> f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    let d = kernel.d;
    let n = spec.cells_per_axis;
    if n == 0 || spec.inner_order == 0 {
        return Err(invalid("quadrature needs cells and inner nodes"));
    }
    let h = 1.0 / n as f64;
    if h > kernel.delta / 4.0 {
        return Err(invalid(format!(
            "cell size {h} exceeds delta/4 = {}; refine the quadrature",
            kernel.delta / 4.0
        )));
    }
    if kernel.is_off() {
        return Ok(0.0);
    }
    let delta = kernel.delta;
    let d2 = delta * delta;
    let normal_cells = ((delta / h).ceil() as usize).min(n);
    let reach = SQRT_2 * delta;
    let mut kinks = kernel.kinks();
    kinks.retain(|k| *k < delta);
    let tangential = if d > 1 { n.pow(d as u32 - 1) } else { 1 };
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut total = 0.0;
    for t_idx in 0..tangential {
        let mut r = t_idx;
        for a in (0..d - 1).rev() {
            x[a] = ((r % n) as f64 + 0.5) * h;
            r /= n;
        }
        // Range of y' cells within reach of x' on each tangential axis.
        let ranges: Vec<(usize, usize)> = (0..d - 1)
            .map(|a| {
                let lo = ((x[a] - reach) / h).floor().max(0.0) as usize;
                let hi = (((x[a] + reach) / h).ceil() as usize).min(n);
                (lo, hi)
            })
            .collect();
        let counts: Vec<usize> = ranges.iter().map(|(lo, hi)| hi - lo).collect();
        let partner_cells: usize = counts.iter().product();
        for j in 0..normal_cells {
            x[d - 1] = (j as f64 + 0.5) * h;
            for p_idx in 0..partner_cells {
                let mut r = p_idx;
                for a in (0..d - 1).rev() {
                    y[a] = ((ranges[a].0 + r % counts[a]) as f64 + 0.5) * h;
                    r /= counts[a];
                }
                y[d - 1] = 0.0;
                let base = interface_dist_sq_unchecked(&x, &y);
                if base >= d2 {
                    continue;
                }
                let s = (d2 - base).sqrt();
                let mut cuts = vec![0.0];
                for k in &kinks {
                    let k2 = k * k - base;
                    if k2 > 0.0 {
                        cuts.push(k2.sqrt());
                    }
                }
                cuts.push(s);
                let mut inner = 0.0;
                for win in cuts.windows(2) {
                    let (nodes, weights) = gauss_on(spec.inner_order, win[0], win[1]);
                    for (b, w) in nodes.iter().zip(&weights) {
                        y[d - 1] = -b;
                        inner += w * f(&x, &y) * kernel.of_dist_sq(base + b * b);
                    }
                }
                total += inner;
            }
        }
    }
    Ok(total * h.powi(2 * d as i32 - 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub delta: f64,
    pub ratio: f64,
    pub increment: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub d: usize,
    pub rows: Vec<CalibrationRow>,
    /// `R(delta_min)`.
    pub kappa: f64,
    /// Relative increment at the smallest delta stayed within 5%.
    pub converged: bool,
    pub paper_value: f64,
    pub closed_form_limit: f64,
}

impl Calibration {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,ratio,increment\n");
        for r in &self.rows {
            let inc = r.increment.map(|v| format!("{v:.12e}")).unwrap_or_default();
            s.push_str(&format!("{:.12e},{:.12e},{}\n", r.delta, r.ratio, inc));
        }
        s
    }
}

/// Minkowski ratios `R(delta) = H^{2d}(I^delta) / (c_{d+1} delta^{d+1})` along decreasing `deltas`.
pub fn calibrate_kappa(d: usize, deltas: &[f64], spec: &QuadratureSpec) -> Result<Calibration> {
    if deltas.is_empty() {
        return Err(invalid("no deltas given"));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("deltas must be strictly decreasing"));
    }
    if deltas.iter().any(|&v| !(v > 0.0 && v < 0.2)) {
        return Err(invalid("deltas must lie in (0, 0.2)"));
    }
    let mut rows: Vec<CalibrationRow> = Vec::new();
    for &delta in deltas {
        let kernel = AnnihilationKernel::new(d, delta)?;
        let ratio = pair_kernel_integral(&kernel, &|_, _| 1.0, spec)?;
        let increment = rows.last().map(|r| (r.ratio - ratio).abs());
        rows.push(CalibrationRow { delta, ratio, increment });
    }
    let last = rows.last().expect("nonempty");
    let converged = last.increment.is_none_or(|inc| inc <= 0.05 * last.ratio.abs());
    Ok(Calibration {
        d,
        kappa: last.ratio,
        rows,
        converged,
        paper_value: PAPER_LIMIT_RATIO,
        closed_form_limit: kappa_limit(d),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairNodeOptions {
    /// Radial Gauss nodes in the normal quarter-plane.
    pub radial: usize,
    /// Angular Gauss nodes in the normal quarter-plane.
    pub angular: usize,
    /// Gauss nodes per sign of each tangential difference coordinate.
    pub tangential: usize,
    /// Composite panels along each tangential centre coordinate (8 nodes each).
    pub centre_panels: usize,
}

impl Default for PairNodeOptions {
    fn default() -> Self {
        PairNodeOptions { radial: 16, angular: 16, tangential: 6, centre_panels: 4 }
    }
}

/// Weighted node pairs `(x, y)` of the zone in reference coordinates, weights including `ell`.
///
/// `sum_q w_q F(x_q, y_q)` approximates `∫∫ F ell` with spectral accuracy for smooth `F`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairNodes {
    pub d: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
}

impl PairNodes {
    pub fn build(kernel: &AnnihilationKernel, opts: &PairNodeOptions) -> Result<Self> {
        let d = kernel.d;
        if opts.radial == 0 || opts.angular == 0 || (d > 1 && (opts.tangential == 0 || opts.centre_panels == 0)) {
            return Err(invalid("pair quadrature needs positive node counts"));
        }
        if kernel.delta * SQRT_2 >= 1.0 {
            return Err(invalid("pair quadrature assumes sqrt(2) delta < 1"));
        }
        let mut nodes = PairNodes { d, x: vec![], y: vec![], w: vec![] };
        if kernel.is_off() {
            return Ok(nodes);
        }
        let delta = kernel.delta;
        let kinks = kernel.kinks();
        let (theta, w_theta) = gauss_on(opts.angular, 0.0, 0.5 * PI);
        // Tangential differences w in the (d-1)-ball, nested Gauss split at zero.
        let mut tangents: Vec<(Vec<f64>, f64)> = vec![(vec![], 1.0)];
        for _ in 0..d - 1 {
            let mut next = vec![];
            for (w, wt) in &tangents {
                let used: f64 = w.iter().map(|v| v * v).sum();
                let lim = (delta * delta - used).max(0.0).sqrt();
                for (a, b) in [(-lim, 0.0), (0.0, lim)] {
                    let (pts, wts) = gauss_on(opts.tangential, a, b);
                    for (p, q) in pts.iter().zip(&wts) {
                        let mut nw = w.clone();
                        nw.push(*p);
                        next.push((nw, wt * q));
                    }
                }
            }
            tangents = next;
        }
        let jac = SQRT_2.powi(d as i32 - 1);
        for (w, wt) in &tangents {
            let used: f64 = w.iter().map(|v| v * v).sum();
            let rmax2 = delta * delta - used;
            if rmax2 <= 0.0 {
                continue;
            }
            let rmax = rmax2.sqrt();
            let mut cuts = vec![0.0];
            for k in &kinks {
                let k2 = k * k - used;
                if k2 > 0.0 && k2 < rmax2 {
                    cuts.push(k2.sqrt());
                }
            }
            cuts.push(rmax);
            let mut radial = vec![];
            for win in cuts.windows(2) {
                let (pts, wts) = gauss_on(opts.radial, win[0], win[1]);
                radial.extend(pts.into_iter().zip(wts));
            }
            // Centres c on prod_i [|w_i|/√2, 1 - |w_i|/√2].
            let mut centres: Vec<(Vec<f64>, f64)> = vec![(vec![], 1.0)];
            for wi in w {
                let half = wi.abs() / SQRT_2;
                let (pts, wts) = composite_gauss(opts.centre_panels, 8, half, 1.0 - half);
                let mut next = vec![];
                for (c, cw) in &centres {
                    for (p, q) in pts.iter().zip(&wts) {
                        let mut nc = c.clone();
                        nc.push(*p);
                        next.push((nc, cw * q));
                    }
                }
                centres = next;
            }
            for (r, wr) in &radial {
                let ell = kernel.of_dist_sq(used + r * r);
                for (th, wth) in theta.iter().zip(&w_theta) {
                    let (a, b) = (r * th.cos(), r * th.sin());
                    for (c, wc) in &centres {
                        for i in 0..d - 1 {
                            nodes.x.push(c[i] + w[i] / SQRT_2);
                        }
                        nodes.x.push(a);
                        for i in 0..d - 1 {
                            nodes.y.push(c[i] - w[i] / SQRT_2);
                        }
                        nodes.y.push(b);
                        nodes.w.push(jac * wt * wr * r * wth * wc * ell);
                    }
                }
            }
        }
        Ok(nodes)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn x_at(&self, q: usize) -> &[f64] {
        &self.x[q * self.d..(q + 1) * self.d]
    }

    pub fn y_at(&self, q: usize) -> &[f64] {
        &self.y[q * self.d..(q + 1) * self.d]
    }

    /// Node of the given species in reference coordinates.
    pub fn point(&self, s: Species, q: usize) -> &[f64] {
        match s {
            Species::Plus => self.x_at(q),
            Species::Minus => self.y_at(q),
        }
    }

    /// `sum_q w_q F(x_q, y_q)` with `F` in reference coordinates.
    pub fn integrate(&self, f: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
        (0..self.len()).map(|q| self.w[q] * f(self.x_at(q), self.y_at(q))).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(2) - PI).abs() < 1e-14);
        assert!((unit_ball_volume(3) - 4.0 * PI / 3.0).abs() < 1e-14);
    }

    #[test]
    fn ell_examples() {
        let g1 = DomainPair::new(1).unwrap();
        let k = AnnihilationKernel::new(1, 0.1).unwrap();
        assert!((k.ell_eval(&g1, &[0.05], &[-0.05]).unwrap() - 31.830988618379067).abs() < 1e-9);
        assert_eq!(k.ell_eval(&g1, &[0.5], &[-0.5]).unwrap(), 0.0);
        let g2 = DomainPair::new(2).unwrap();
        let k2 = AnnihilationKernel::new(2, 0.1).unwrap();
        let v = k2.ell_eval(&g2, &[0.5, 0.01], &[0.5, -0.01]).unwrap();
        assert!((v - 238.73241463784303).abs() < 1e-8);
    }

    #[test]
    fn pair_nodes_reproduce_zone_volume() {
        let k1 = AnnihilationKernel::new(1, 0.07).unwrap();
        let n1 = PairNodes::build(&k1, &PairNodeOptions::default()).unwrap();
        assert!((n1.integrate(|_, _| 1.0) - 0.25).abs() < 1e-13);
        let k2 = AnnihilationKernel::new(2, 0.05).unwrap();
        let n2 = PairNodes::build(&k2, &PairNodeOptions::default()).unwrap();
        let exact = SQRT_2 / 4.0 - 3.0 * 0.05 / 16.0;
        assert!((n2.integrate(|_, _| 1.0) - exact).abs() < 1e-12);
    }

    #[test]
    fn pair_nodes_points_lie_in_zone() {
        let k2 = AnnihilationKernel::new(2, 0.1).unwrap();
        let n2 = PairNodes::build(&k2, &PairNodeOptions::default()).unwrap();
        for q in 0..n2.len() {
            let (x, y) = (n2.x_at(q), n2.y_at(q));
            assert!(x.iter().chain(y).all(|v| (0.0..=1.0).contains(v)));
            let ym = crate::geometry::mirror(y);
            assert!(interface_dist_sq_unchecked(x, &ym) < 0.01 + 1e-15);
        }
    }

    #[test]
    fn coarse_quadrature_rejected() {
        let k = AnnihilationKernel::new(1, 0.01).unwrap();
        let spec = QuadratureSpec { cells_per_axis: 100, inner_order: 8 };
        assert!(pair_kernel_integral(&k, &|_, _| 1.0, &spec).is_err());
    }
}
