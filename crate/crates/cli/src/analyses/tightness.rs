//! Scaling of the window statistic of the annihilation rate with the window width.

use anyhow::{bail, Result};
use serde_json::json;

use manl_core::sim::{tightness, RunPlan, StepProbe};
use manl_core::stats::{ols_slope, Estimate};

use super::{num, scale, Analysis, Check, Outcome, Table};
use crate::campaign::{Campaign, Handle, Request};
use crate::config::{ExperimentKind, ModelConfig, TightnessParams};

pub struct Tightness {
    params: TightnessParams,
    handle: Option<Handle>,
}

impl Tightness {
    pub fn new(params: TightnessParams) -> Self {
        Tightness { params, handle: None }
    }

    fn ends(&self) -> Vec<f64> {
        self.params.windows.iter().map(|w| self.params.start + w).collect()
    }
}

impl Analysis for Tightness {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Tightness
    }

    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()> {
        let (replicas, t) = scale(model, self.params.replicas, None);
        let n = self.params.n.unwrap_or(model.sim.n);
        if self.params.windows.len() < 2 || self.params.windows.iter().any(|&w| w.is_nan() || w <= 0.0) {
            bail!("tightness needs at least two positive window widths");
        }
        if self.ends().iter().any(|&b| b > t) || self.params.start < 0.0 {
            bail!("tightness windows must lie in [0, {t}]");
        }
        let mut marks = vec![self.params.start];
        marks.extend(self.ends());
        marks.sort_by(f64::total_cmp);
        let plan = RunPlan {
            observables: vec![self.params.observable.clone()],
            marks,
            stepwise: vec![StepProbe::PairProduct(0)],
            ..Default::default()
        };
        self.handle = Some(campaign.add(Request { n, replicas, t_end: t, kernel_off: false, plan }));
        Ok(())
    }

    fn finish(&mut self, _model: &ModelConfig, campaign: &Campaign) -> Result<Outcome> {
        let view = campaign.view(self.handle.expect("prepared"));
        let n = view.n();
        let a = view.mark(self.params.start)?;
        let p = view.probe(0);
        let mut table = Table::new("tightness.csv", &["N", "window", "statistic", "se"]);
        let mut stats: Vec<(f64, Estimate)> = vec![];
        for (&w, b) in self.params.windows.iter().zip(self.ends()) {
            let est = tightness(view.records(), n, p, a, view.mark(b)?);
            table.push(vec![n.to_string(), num(w), num(est.value), num(est.se)]);
            stats.push((w, est));
        }
        let x: Vec<f64> = stats.iter().map(|(w, _)| w.ln()).collect();
        let y: Vec<f64> = stats.iter().map(|(_, e)| e.value.ln()).collect();
        let exponent = if stats.len() == 2 { (y[1] - y[0]) / (x[1] - x[0]) } else { ols_slope(&x, &y).0 };
        // Delta method on the log ratio.
        let rel: f64 = stats.iter().map(|(_, e)| (e.se / e.value).powi(2)).sum::<f64>().sqrt();
        let exponent_se = rel / (x[x.len() - 1] - x[0]).abs();
        let checks = vec![Check::at_least(12, format!("window statistic exponent at N = {n}"), exponent, 1.2)];
        Ok(Outcome {
            kind: self.kind(),
            tables: vec![table],
            summary_tables: vec!["tightness.csv".into()],
            checks,
            summary: json!({ "exponent": exponent, "exponent_se": exponent_se }),
        })
    }
}
