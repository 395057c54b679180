//! Fluctuation variances against the Ornstein-Uhlenbeck limit, the annihilation-free
//! reduction and the martingale quadratic variation.

use anyhow::Result;
use serde_json::json;

use manl_core::geometry::Species;
use manl_core::observable::ObservablePair;
use manl_core::sim::{fluctuation_field, Centering, RunPlan};
use manl_core::solvers::{solve_hydro, NoiseBackground, OuCov, QSolver, SolverConfig};
use manl_core::stats::{mean_se, variance_se};

use super::{box_integral, num, scale, Analysis, Check, Outcome, Table};
use crate::campaign::{Campaign, Handle, Request};
use crate::config::{CltParams, ExperimentKind, ModelConfig};

/// Quadrature rounding of the free-variance oracle.
const ROUNDING: f64 = 1e-10;

pub struct Clt {
    params: CltParams,
    t: f64,
    main: Option<Handle>,
    off: Option<Handle>,
    mart: Option<Handle>,
}

impl Clt {
    pub fn new(params: CltParams) -> Self {
        Clt { params, t: 0.0, main: None, off: None, mart: None }
    }
}

/// Gram matrix of `Z_t` over the observables.
fn predicted(model: &ModelConfig, obs: &[ObservablePair], t: f64, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let lam = model.lambda_eff()?;
    let u0 = model.initial();
    let u = solve_hydro(model.sim.d, &u0, lam, t, &[], cfg)?;
    let q = QSolver::new(&u, lam, cfg)?;
    let ou = OuCov::new(&NoiseBackground::Limit { u: &u, lambda_eff: lam }, &q, &u0, cfg)?;
    let items: Vec<(ObservablePair, f64)> = obs.iter().map(|o| (o.clone(), t)).collect();
    Ok(ou.gram(&items)?)
}

/// `sum_s <phi_s^2, u_s(t)> - <phi_s, u_s(t)>^2` for independent reflected motions.
fn free_variance(model: &ModelConfig, obs: &ObservablePair, t: f64) -> Result<f64> {
    let d = model.sim.d;
    let u = solve_hydro(d, &model.initial(), 0.0, t, &[], &model.solver)?;
    let idx = u.index_of(t)?;
    let mut v = 0.0;
    for s in Species::BOTH {
        let phi = obs.of(s);
        let m1 = box_integral(d, &|x| phi.value(x) * u.eval(s, idx, x));
        let m2 = box_integral(d, &|x| phi.value(x).powi(2) * u.eval(s, idx, x));
        v += m2 - m1 * m1;
    }
    Ok(v)
}

impl Analysis for Clt {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Clt
    }

    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()> {
        let (replicas, t) = scale(model, self.params.replicas, self.params.t);
        self.t = t;
        let n = self.params.n.unwrap_or(model.sim.n);
        let obs = &self.params.observables;
        let plan = || RunPlan { observables: obs.clone(), obs_times: vec![t], ..Default::default() };
        self.main = Some(campaign.add(Request { n, replicas, t_end: t, kernel_off: false, plan: plan() }));
        if self.params.lambda_off {
            let n = self.params.lambda_off_n;
            self.off = Some(campaign.add(Request { n, replicas, t_end: t, kernel_off: true, plan: plan() }));
        }
        if let Some(mp) = &self.params.martingale {
            let plan = RunPlan {
                observables: obs.clone(),
                marks: vec![mp.t],
                martingale: (0..obs.len()).collect(),
                ..Default::default()
            };
            self.mart =
                Some(campaign.add(Request { n: mp.n, replicas: mp.replicas, t_end: mp.t, kernel_off: false, plan }));
        }
        Ok(())
    }

    fn finish(&mut self, model: &ModelConfig, campaign: &Campaign) -> Result<Outcome> {
        let t = self.t;
        let obs = &self.params.observables;
        let k = obs.len();
        let mut cfg = model.solver.clone();
        cfg.kmax = self.params.solver_kmax;
        let gram = predicted(model, obs, t, &cfg)?;
        let mut wide = cfg.clone();
        wide.kmax = 2 * cfg.kmax;
        let gram_wide = predicted(model, obs, t, &wide)?;
        let gram_fine = predicted(model, obs, t, &cfg.refined())?;

        let mut cov = Table::new("predicted_cov.csv", &["phi_id", "psi_id", "s", "t", "value", "band"]);
        for i in 0..k {
            for j in 0..k {
                let g = gram[i * k + j];
                let band = (g - gram_wide[i * k + j]).abs() + (g - gram_fine[i * k + j]).abs();
                cov.push(vec![i.to_string(), j.to_string(), num(t), num(t), num(g), num(band)]);
            }
        }

        let mut checks = vec![];
        let mut tables = vec![];
        let mut summary = Table::new(
            "clt_summary.csv",
            &["case", "N", "t", "phi_id", "variance", "se", "predicted", "band"],
        );
        let view = campaign.view(self.main.expect("prepared"));
        let n = view.n();
        let tg = view.grid_time(t)?;
        let mut raw = Table::new("clt.csv", &["N", "replica", "phi_id", "Y_value"]);
        for i in 0..k {
            let y = fluctuation_field(&view.pairings(t, i)?, n, Centering::EnsembleMean)?;
            for (r, v) in view.records().iter().zip(&y) {
                raw.push(vec![n.to_string(), r.replica.to_string(), i.to_string(), num(*v)]);
            }
            let var = variance_se(&y);
            let g = gram[i * k + i];
            let band = (g - gram_wide[i * k + i]).abs() + (g - gram_fine[i * k + i]).abs();
            summary.push(vec![
                "ou".into(),
                n.to_string(),
                num(tg),
                i.to_string(),
                num(var.value),
                num(var.se),
                num(g),
                num(band),
            ]);
            checks.push(Check::at_most(
                8,
                format!("phi {i}: |Var Y - ou_cov| at N = {n} vs 3 combined SE"),
                (var.value - g).abs(),
                3.0 * var.se.hypot(band),
            ));
        }
        tables.push(raw);

        if let Some(h) = self.off {
            let view = campaign.view(h);
            let n = view.n();
            let mut raw = Table::new("clt_lambda_off.csv", &["N", "replica", "phi_id", "Y_value"]);
            for (i, o) in obs.iter().enumerate() {
                let y = fluctuation_field(&view.pairings(t, i)?, n, Centering::EnsembleMean)?;
                for (r, v) in view.records().iter().zip(&y) {
                    raw.push(vec![n.to_string(), r.replica.to_string(), i.to_string(), num(*v)]);
                }
                let var = variance_se(&y);
                let want = free_variance(model, o, view.grid_time(t)?)?;
                summary.push(vec![
                    "lambda_off".into(),
                    n.to_string(),
                    num(view.grid_time(t)?),
                    i.to_string(),
                    num(var.value),
                    num(var.se),
                    num(want),
                    num(0.0),
                ]);
                checks.push(Check::at_most(
                    8,
                    format!("phi {i}: annihilation off, |Var Y - free variance| at N = {n} vs 3 SE"),
                    (var.value - want).abs(),
                    3.0 * var.se + ROUNDING,
                ));
            }
            tables.push(raw);
        }

        if let (Some(h), Some(mp)) = (self.mart, &self.params.martingale) {
            let view = campaign.view(h);
            let n = view.n();
            let mark = view.mark(mp.t)?;
            let mut raw = Table::new("martingale.csv", &["N", "replica", "phi_id", "m_value", "qv_value"]);
            for i in 0..k {
                let idx = view.martingale(i);
                let (mut m, mut qv) = (vec![], vec![]);
                for r in view.records() {
                    let path = &r.martingale[idx];
                    m.push(path.m_values[mark]);
                    qv.push(path.qv_values[mark]);
                    raw.push(vec![
                        n.to_string(),
                        r.replica.to_string(),
                        i.to_string(),
                        num(path.m_values[mark]),
                        num(path.qv_values[mark]),
                    ]);
                }
                let var = variance_se(&m);
                let mq = mean_se(&qv);
                summary.push(vec![
                    "martingale".into(),
                    n.to_string(),
                    num(mp.t),
                    i.to_string(),
                    num(var.value),
                    num(var.se),
                    num(mq.value),
                    num(mq.se),
                ]);
                checks.push(Check::at_most(
                    9,
                    format!("phi {i}: |Var M - mean QV| at N = {n}, t = {} vs 3 combined SE", mp.t),
                    (var.value - mq.value).abs(),
                    3.0 * var.se.hypot(mq.se),
                ));
            }
            tables.push(raw);
        }
        tables.push(cov);
        tables.push(summary);

        Ok(Outcome {
            kind: self.kind(),
            tables,
            summary_tables: vec!["clt_summary.csv".into()],
            checks,
            summary: json!({ "t": t, "lambda_eff": model.lambda_eff()?, "predicted": gram }),
        })
    }
}
