//! Deterministic kernel, spectrum and pair-conservation checks.

use std::f64::consts::PI;

use anyhow::Result;
use serde_json::json;

use manl_core::geometry::{DomainPair, Interval, Species};
use manl_core::quadrature::composite_gauss;
use manl_core::sim::{init_system, SimConfig};
use manl_core::spectral::{apply_semigroup, kernel_eval, weyl_count, GridField, KernelConfig};

use super::{num, Analysis, Check, Outcome, Table};
use crate::campaign::Campaign;
use crate::config::{ExperimentKind, ModelConfig, SelftestParams};

pub struct Selftest {
    params: SelftestParams,
}

impl Selftest {
    pub fn new(params: SelftestParams) -> Self {
        Selftest { params }
    }
}

/// Tensor Gauss nodes and weights on a box.
fn box_nodes(bx: &[Interval], panels: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let axes: Vec<_> = bx.iter().map(|iv| composite_gauss(panels, 8, iv.lo, iv.hi)).collect();
    let mut pts = vec![vec![]];
    let mut wts = vec![1.0];
    for (nodes, weights) in &axes {
        let mut p2 = Vec::with_capacity(pts.len() * nodes.len());
        let mut w2 = Vec::with_capacity(pts.len() * nodes.len());
        for (p, w) in pts.iter().zip(&wts) {
            for (x, v) in nodes.iter().zip(weights) {
                let mut q = p.clone();
                q.push(*x);
                p2.push(q);
                w2.push(w * v);
            }
        }
        pts = p2;
        wts = w2;
    }
    (pts, wts)
}

/// Sample points of a box: corners, faces and interior.
fn probe_points(bx: &[Interval]) -> Vec<Vec<f64>> {
    let fracs = [0.0, 0.013, 0.31, 0.5, 0.87, 1.0];
    let mut pts = vec![vec![]];
    for iv in bx {
        pts = pts
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                fracs.iter().map(move |f| {
                    let mut q = p.clone();
                    q.push(iv.lo + f * iv.len());
                    q
                })
            })
            .collect();
    }
    pts
}

fn p(t: f64, x: &[f64], y: &[f64], bx: &[Interval], cfg: &KernelConfig) -> Result<f64> {
    Ok(kernel_eval(t, x, y, bx, cfg)?.value)
}

/// Criterion 1 on one box.
fn kernel_checks(bx: &[Interval], out: &mut Vec<Check>) -> Result<()> {
    let d = bx.len();
    let tag = format!("d={d} box {:?}", bx.iter().map(|iv| (iv.lo, iv.hi)).collect::<Vec<_>>());
    let cfg = KernelConfig::default();
    let panels = if d == 1 { 256 } else { 48 };
    let (nodes, weights) = box_nodes(bx, panels);
    let mut sample = probe_points(bx);
    if d > 1 {
        sample = sample.into_iter().step_by(5).collect();
    }

    let mut mass_err: f64 = 0.0;
    for t in [1e-3, 1e-1, 1.0] {
        for x in &sample {
            let mut m = 0.0;
            for (y, w) in nodes.iter().zip(&weights) {
                m += w * p(t, x, y, bx, &cfg)?;
            }
            mass_err = mass_err.max((m - 1.0).abs());
        }
    }
    out.push(Check::below(1, format!("mass conservation {tag}"), mass_err, 1e-9));

    let pts = probe_points(bx);
    let mut asym = 0usize;
    for t in [1e-3, 1e-1, 1.0] {
        for x in &pts {
            for y in &pts {
                if p(t, x, y, bx, &cfg)?.to_bits() != p(t, y, x, bx, &cfg)?.to_bits() {
                    asym += 1;
                }
            }
        }
    }
    out.push(Check::holds(1, format!("symmetry {tag}"), asym as f64, "== 0 asymmetric pairs", asym == 0));

    let mut ck: f64 = 0.0;
    for (s, t) in [(0.01, 0.02), (0.05, 0.05), (0.1, 0.3)] {
        for x in sample.iter().step_by(2) {
            for y in sample.iter().skip(1).step_by(2) {
                let mut v = 0.0;
                for (z, w) in nodes.iter().zip(&weights) {
                    v += w * p(s, x, z, bx, &cfg)? * p(t, z, y, bx, &cfg)?;
                }
                ck = ck.max((v - p(s + t, x, y, bx, &cfg)?).abs());
            }
        }
    }
    out.push(Check::below(1, format!("Chapman-Kolmogorov {tag}"), ck, 1e-7));

    let (img, spec) = (KernelConfig::images(), KernelConfig::spectral(0));
    let mut cross: f64 = 0.0;
    for x in &pts {
        for y in &pts {
            cross = cross.max((p(0.1, x, y, bx, &img)? - p(0.1, x, y, bx, &spec)?).abs());
        }
    }
    out.push(Check::below(1, format!("images vs spectral at t=0.1 {tag}"), cross, 1e-10));
    Ok(())
}

/// Criterion 2: `P_t cos(k pi x) = exp(-(k pi)^2 t / 2) cos(k pi x)`, through the kernel and the grid semigroup.
fn eigen_checks(out: &mut Vec<Check>) -> Result<()> {
    let bx = [Interval::UNIT];
    let cfg = KernelConfig::default();
    let (nodes, weights) = composite_gauss(256, 8, 0.0, 1.0);
    let xs: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
    let mut worst: f64 = 0.0;
    let mut worst_grid: f64 = 0.0;
    for k in 0..=8usize {
        let kp = PI * k as f64;
        for t in [0.01, 0.1] {
            let decay = (-0.5 * kp * kp * t).exp();
            for &x in &xs {
                let mut v = 0.0;
                for (y, w) in nodes.iter().zip(&weights) {
                    v += w * p(t, &[x], &[*y], &bx, &cfg)? * (kp * y).cos();
                }
                worst = worst.max((v - decay * (kp * x).cos()).abs());
            }
            let f = GridField::from_fn(vec![Interval::UNIT], 64, |x| (kp * x[0]).cos());
            let g = apply_semigroup(t, &f, &cfg)?;
            let exact = GridField::from_fn(vec![Interval::UNIT], 64, |x| decay * (kp * x[0]).cos());
            worst_grid = worst_grid.max(g.sup_distance(&exact));
        }
    }
    out.push(Check::below(2, "eigen decay through the kernel, k <= 8", worst, 1e-8));
    out.push(Check::below(2, "eigen decay on the grid semigroup, k <= 8", worst_grid, 1e-8));
    Ok(())
}

/// Criterion 3: `weyl_count(x) / x^{d/2}` in `d = 2`.
fn weyl_check(out: &mut Vec<Check>) -> (f64, f64) {
    let bx = [Interval::UNIT; 2];
    let r = |x: f64| weyl_count(x, &bx) as f64 / x;
    let (a, b) = (r(2e3), r(8e3));
    out.push(Check::below(3, "Weyl ratio variation between 2e3 and 8e3, d=2", (a - b).abs() / a.min(b), 0.1));
    (a, b)
}

/// Criterion 5: equal alive counts after every step.
fn conservation(params: &SelftestParams, model: &ModelConfig, out: &mut Vec<Check>) -> Result<(u64, u64)> {
    let per_seed = params.particle_steps.div_ceil(params.seeds.len().max(1) as u64);
    let (mut steps, mut violations) = (0u64, 0u64);
    for (i, &seed) in params.seeds.iter().enumerate() {
        let mut sim: SimConfig = model.sim_for(params.n, 1, model.sim.t_end);
        sim.seed = seed;
        let kernel = model.kernel_for(&sim)?;
        let (dt, _) = sim.time_step();
        let mut ens = init_system(&sim, 0)?;
        let brute = i == 0;
        let mut done = 0u64;
        while done < per_seed && ens.alive_count() > 0 {
            done += 2 * ens.alive_count() as u64;
            ens.step_with(&kernel, dt, brute);
            if ens.count_alive(Species::Plus) != ens.count_alive(Species::Minus) {
                violations += 1;
            }
        }
        steps += done;
    }
    out.push(Check::holds(
        5,
        format!("pair conservation over {steps} particle-steps"),
        violations as f64,
        format!("== 0 violations and >= {} particle-steps", params.particle_steps),
        violations == 0 && steps >= params.particle_steps,
    ));
    Ok((steps, violations))
}

impl Analysis for Selftest {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Selftest
    }

    fn prepare(&mut self, _model: &ModelConfig, _campaign: &mut Campaign) -> Result<()> {
        Ok(())
    }

    fn finish(&mut self, model: &ModelConfig, _campaign: &Campaign) -> Result<Outcome> {
        let mut checks = vec![];
        for d in [1, 2] {
            let dom = DomainPair::new(d)?;
            for s in Species::BOTH {
                kernel_checks(&dom.box_of(s), &mut checks)?;
            }
        }
        eigen_checks(&mut checks)?;
        let (w1, w2) = weyl_check(&mut checks);
        let (steps, violations) = conservation(&self.params, model, &mut checks)?;
        let mut table = Table::new("selftest.csv", &["criterion", "check", "value", "rule", "passed"]);
        for c in &checks {
            table.push(vec![c.criterion.to_string(), c.label.clone(), num(c.value), c.rule.clone(), c.passed.to_string()]);
        }
        Ok(Outcome {
            kind: self.kind(),
            tables: vec![table],
            summary_tables: vec!["selftest.csv".into()],
            summary: json!({
                "weyl_ratio_2e3": w1,
                "weyl_ratio_8e3": w2,
                "particle_steps": steps,
                "conservation_violations": violations,
            }),
            checks,
        })
    }
}
