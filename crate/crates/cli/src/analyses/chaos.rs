//! Decay of the two-species correlation defect `∫ Phi (F^(1,1) - f+ f-)` in `N`.

use anyhow::Result;
use serde_json::json;

use manl_core::hierarchy::ExpansionPairing;
use manl_core::sim::{ProductTest, RunPlan};
use manl_core::stats::{mean_se, ols_slope};

use super::expansion::expansion_terms;
use super::{num, scale, Analysis, Check, Outcome, Table};
use crate::campaign::{Campaign, Handle, Request};
use crate::config::{ChaosParams, ExperimentKind, ModelConfig};

struct Level {
    n: usize,
    handle: Handle,
    terms: Vec<ExpansionPairing>,
}

pub struct Chaos {
    params: ChaosParams,
    t: f64,
    levels: Vec<Level>,
}

impl Chaos {
    pub fn new(params: ChaosParams) -> Self {
        Chaos { params, t: 0.0, levels: vec![] }
    }
}

impl Analysis for Chaos {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Chaos
    }

    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()> {
        let (replicas, t) = scale(model, self.params.replicas, self.params.t);
        self.t = t;
        let tests: Vec<ProductTest> =
            self.params.tests.iter().map(|c| ProductTest { plus: vec![c.phi.clone()], minus: vec![c.psi.clone()] }).collect();
        let mut ns = self.params.n_values.clone().unwrap_or_else(|| vec![model.sim.n]);
        ns.sort_unstable();
        ns.dedup();
        for n in ns {
            let (run, terms) = expansion_terms(model, n, &tests, t, self.params.centre)?;
            let plan = RunPlan { tuples: run, obs_times: vec![t], ..Default::default() };
            let handle = campaign.add(Request { n, replicas, t_end: t, kernel_off: false, plan });
            self.levels.push(Level { n, handle, terms });
        }
        Ok(())
    }

    fn finish(&mut self, _model: &ModelConfig, campaign: &Campaign) -> Result<Outcome> {
        let t = self.t;
        let mut table = Table::new(
            "chaos.csv",
            &["N", "t", "test_id", "estimate", "se", "product", "defect", "predicted_defect"],
        );
        let k = self.params.tests.len();
        let mut fits: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![], vec![]); k];
        for lv in &self.levels {
            let view = campaign.view(lv.handle);
            for (i, term) in lv.terms.iter().enumerate() {
                let est = mean_se(&view.tuples(t, i)?);
                let defect = est.value - term.a;
                table.push(vec![
                    lv.n.to_string(),
                    num(view.grid_time(t)?),
                    i.to_string(),
                    num(est.value),
                    num(est.se),
                    num(term.a),
                    num(defect),
                    num(term.b / lv.n as f64),
                ]);
                fits[i].0.push((lv.n as f64).ln());
                fits[i].1.push(defect.abs().ln());
            }
        }
        let mut checks = vec![];
        let mut slopes = vec![];
        for (i, (x, y)) in fits.iter().enumerate() {
            let (slope, _, se) = if x.len() >= 2 { ols_slope(x, y) } else { (f64::NAN, f64::NAN, f64::NAN) };
            slopes.push(json!({"test_id": i, "slope": slope, "se": se}));
            checks.push(Check::within(10, format!("test {i}: log-log slope of |defect| in N"), slope, -1.4, -0.6));
        }
        Ok(Outcome {
            kind: self.kind(),
            tables: vec![table],
            summary_tables: vec!["chaos.csv".into()],
            checks,
            summary: json!({ "t": t, "slopes": slopes }),
        })
    }
}
