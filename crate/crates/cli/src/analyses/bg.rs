//! Boltzmann-Gibbs residual: the time-integrated pair fluctuation against its projection
//! onto the fluctuation field.

use std::sync::Arc;

use anyhow::{bail, Result};
use serde_json::json;

use manl_core::sim::{bg_residual, Centering, ProjectionTable, RunPlan, StepProbe};
use manl_core::stats::Estimate;

use super::expansion::{one_particle, solver_horizon};
use super::{num, scale, Analysis, Check, Outcome, Table};
use crate::campaign::{Campaign, Handle, Request};
use crate::config::{BgParams, ExperimentKind, ModelConfig};

pub struct Bg {
    params: BgParams,
    t: f64,
    levels: Vec<(usize, Handle)>,
}

impl Bg {
    pub fn new(params: BgParams) -> Self {
        Bg { params, t: 0.0, levels: vec![] }
    }
}

impl Analysis for Bg {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Bg
    }

    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()> {
        if model.sim.d != 1 {
            bail!("the Boltzmann-Gibbs experiment is implemented for d = 1");
        }
        let (replicas, t_end) = scale(model, self.params.replicas, None);
        self.t = self.params.t.unwrap_or_else(|| solver_horizon(model) / 2.0);
        if self.t > t_end {
            bail!("bg time {} beyond the run horizon {t_end}", self.t);
        }
        let mut ns = self.params.n_values.clone().unwrap_or_else(|| vec![model.sim.n]);
        ns.sort_unstable();
        ns.dedup();
        for n in ns {
            let kernel = model.kernel_at(n)?;
            let f = one_particle(model, &kernel, self.t)?;
            let mut plan = RunPlan { marks: vec![self.t], ..Default::default() };
            for (k, obs) in self.params.observables.iter().enumerate() {
                let table = ProjectionTable::from_field(&f, &kernel, obs, self.params.n_theta)?;
                plan.observables.push(obs.clone());
                plan.stepwise.push(StepProbe::Projection(Arc::new(table)));
                plan.stepwise.push(StepProbe::PairProduct(k));
            }
            self.levels.push((n, campaign.add(Request { n, replicas, t_end, kernel_off: false, plan })));
        }
        Ok(())
    }

    fn finish(&mut self, _model: &ModelConfig, campaign: &Campaign) -> Result<Outcome> {
        let t = self.t;
        let mut table = Table::new("bg.csv", &["N", "t", "residual", "se", "phi_id"]);
        let k = self.params.observables.len();
        let mut series: Vec<Vec<(usize, Estimate)>> = vec![vec![]; k];
        for &(n, h) in &self.levels {
            let view = campaign.view(h);
            let mark = view.mark(t)?;
            for (i, s) in series.iter_mut().enumerate() {
                let r = bg_residual(view.records(), n, view.probe(2 * i), view.probe(2 * i + 1), mark, Centering::EnsembleMean)?;
                table.push(vec![n.to_string(), num(t), num(r.value), num(r.se), i.to_string()]);
                s.push((n, r));
            }
        }
        let mut checks = vec![];
        let mut strict = vec![];
        for (i, s) in series.iter().enumerate() {
            for w in s.windows(2) {
                let ((n0, a), (n1, b)) = (w[0], w[1]);
                checks.push(Check::at_most(
                    13,
                    format!("phi {i}: residual at N = {n1} vs N = {n0} plus 3 combined SE"),
                    b.value,
                    a.value + 3.0 * a.se.hypot(b.se),
                ));
            }
            strict.push(s.windows(2).all(|w| w[1].1.value < w[0].1.value));
        }
        Ok(Outcome {
            kind: self.kind(),
            tables: vec![table],
            summary_tables: vec!["bg.csv".into()],
            checks,
            summary: json!({ "t": t, "strictly_decreasing": strict }),
        })
    }
}
