//! Law of large numbers against the hydrodynamic solver, and the generator drift identity.

use anyhow::{bail, Result};
use serde_json::json;

use manl_core::sim::RunPlan;
use manl_core::solvers::{solve_fn, solve_hydro, FieldPair, SolverConfig};
use manl_core::stats::{mean_se, Estimate};

use super::{field_pairing, num, scale, Analysis, Check, Outcome, Table};
use crate::campaign::{Campaign, Handle, Request};
use crate::config::{DriftParams, ExperimentKind, HydroParams, ModelConfig};

pub struct Hydro {
    params: HydroParams,
    runs: Vec<(usize, Handle)>,
    drift: Option<(DriftParams, Handle)>,
    t: f64,
}

impl Hydro {
    pub fn new(params: HydroParams) -> Self {
        Hydro { params, runs: vec![], drift: None, t: 0.0 }
    }

    fn n_values(&self, model: &ModelConfig) -> Vec<usize> {
        let mut v = self.params.n_values.clone().unwrap_or_else(|| vec![model.sim.n]);
        v.sort_unstable();
        v.dedup();
        v
    }
}

fn solve(model: &ModelConfig, t: f64, cfg: &SolverConfig) -> Result<FieldPair> {
    Ok(solve_hydro(model.sim.d, &model.initial(), model.lambda_eff()?, t, &[], cfg)?)
}

impl Analysis for Hydro {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Hydro
    }

    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()> {
        let (replicas, t) = scale(model, self.params.replicas, self.params.t);
        self.t = t;
        for n in self.n_values(model) {
            let plan = RunPlan { observables: self.params.observables.clone(), obs_times: vec![t], ..Default::default() };
            self.runs.push((n, campaign.add(Request { n, replicas, t_end: t, kernel_off: false, plan })));
        }
        if let Some(dp) = &self.params.drift {
            let mut times = vec![];
            for &tau in &dp.times {
                if tau - dp.h <= 0.0 || tau + dp.h > t {
                    bail!("drift time {tau} with h = {} does not fit in (0, {t}]", dp.h);
                }
                times.extend([tau - dp.h, tau, tau + dp.h]);
            }
            let plan = RunPlan { observables: dp.observables.clone(), obs_times: times, ..Default::default() };
            let h = campaign.add(Request { n: dp.n, replicas, t_end: t, kernel_off: false, plan });
            self.drift = Some((dp.clone(), h));
        }
        Ok(())
    }

    fn finish(&mut self, model: &ModelConfig, campaign: &Campaign) -> Result<Outcome> {
        let t = self.t;
        let obs = &self.params.observables;
        let cfg = &model.solver;
        let u = solve(model, t, cfg)?;
        let mut doubled = cfg.clone();
        doubled.kmax = 2 * cfg.hydro_kmax(model.sim.d);
        let u2 = solve(model, t, &doubled)?;
        let ur = solve(model, t, &cfg.refined())?;
        let mut solver = vec![];
        let mut band = vec![];
        for o in obs {
            let v = field_pairing(&u, t, o)?;
            band.push((v - field_pairing(&u2, t, o)?).abs() + (v - field_pairing(&ur, t, o)?).abs());
            solver.push(v);
        }

        let mut raw = Table::new("hydro.csv", &["N", "replica", "t", "phi_id", "empirical", "solver", "abs_err"]);
        let mut summary = Table::new(
            "hydro_summary.csv",
            &["N", "t", "phi_id", "mean", "se", "solver", "abs_err", "band", "finite_delta", "finite_delta_err"],
        );
        let mut finite = vec![];
        let mut errs: Vec<Vec<(usize, f64, f64)>> = vec![vec![]; obs.len()];
        for &(n, h) in &self.runs {
            let view = campaign.view(h);
            let tg = view.grid_time(t)?;
            // Same kernel width as the particles: separates the O(delta) bias from sampling error.
            let f = solve_fn(&model.kernel_at(n)?, &model.initial(), t, &[], cfg)?;
            for k in 0..obs.len() {
                let vals = view.pairings(t, k)?;
                for (r, v) in view.records().iter().zip(&vals) {
                    raw.push(vec![
                        n.to_string(),
                        r.replica.to_string(),
                        num(tg),
                        k.to_string(),
                        num(*v),
                        num(solver[k]),
                        num((v - solver[k]).abs()),
                    ]);
                }
                let est = mean_se(&vals);
                let err = (est.value - solver[k]).abs();
                let fd = field_pairing(&f, t, &obs[k])?;
                finite.push(json!({"N": n, "phi_id": k, "value": fd, "err_over_se": (est.value - fd).abs() / est.se}));
                summary.push(vec![
                    n.to_string(),
                    num(tg),
                    k.to_string(),
                    num(est.value),
                    num(est.se),
                    num(solver[k]),
                    num(err),
                    num(band[k]),
                    num(fd),
                    num((est.value - fd).abs()),
                ]);
                errs[k].push((n, err, est.se));
            }
        }

        let mut checks = vec![];
        for (k, e) in errs.iter().enumerate() {
            let decreasing = e.windows(2).all(|w| w[1].1 < w[0].1);
            let desc: Vec<String> = e.iter().map(|(n, err, _)| format!("{n}:{err:.3e}")).collect();
            checks.push(Check::holds(
                7,
                format!("phi {k}: error decreases over N ({})", desc.join(", ")),
                e.last().map(|x| x.1).unwrap_or(f64::NAN),
                "strictly decreasing in N",
                decreasing && !e.is_empty(),
            ));
            if let Some(&(n, err, se)) = e.last() {
                checks.push(Check::below(7, format!("phi {k}: error at N = {n} vs 3 SE + band"), err, 3.0 * se + band[k]));
            }
        }

        let mut tables = vec![raw, summary];
        let mut names = vec!["hydro_summary.csv".to_string()];
        let mut drift_summary = vec![];
        if let Some((dp, h)) = &self.drift {
            let view = campaign.view(*h);
            let mut table = Table::new(
                "drift.csv",
                &["N", "t", "phi_id", "fd_mean", "fd_se", "drift_mean", "drift_se", "diff", "combined_se"],
            );
            for &tau in &dp.times {
                let (ta, tb) = (view.grid_time(tau - dp.h)?, view.grid_time(tau + dp.h)?);
                for k in 0..dp.observables.len() {
                    let a = view.pairings(tau - dp.h, k)?;
                    let b = view.pairings(tau + dp.h, k)?;
                    let fd: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (y - x) / (tb - ta)).collect();
                    let fd = mean_se(&fd);
                    let drift: Vec<f64> = view.observations(tau, k)?.iter().map(|o| o.drift()).collect();
                    let dr = mean_se(&drift);
                    let diff: Estimate = fd.minus(&dr);
                    table.push(vec![
                        view.n().to_string(),
                        num(view.grid_time(tau)?),
                        k.to_string(),
                        num(fd.value),
                        num(fd.se),
                        num(dr.value),
                        num(dr.se),
                        num(diff.value),
                        num(diff.se),
                    ]);
                    checks.push(Check::at_most(
                        6,
                        format!("phi {k}, t = {tau}: |finite difference - mean drift| vs 3 combined SE"),
                        diff.value.abs(),
                        3.0 * diff.se,
                    ));
                    drift_summary.push(json!({"t": tau, "phi_id": k, "fd": fd.value, "drift": dr.value, "se": diff.se}));
                }
            }
            tables.push(table);
            names.push("drift.csv".into());
        }

        Ok(Outcome {
            kind: self.kind(),
            tables,
            summary_tables: names,
            checks,
            summary: json!({
                "t": t,
                "lambda_eff": model.lambda_eff()?,
                "solver": solver,
                "band": band,
                "finite_delta": finite,
                "drift": drift_summary,
            }),
        })
    }
}
