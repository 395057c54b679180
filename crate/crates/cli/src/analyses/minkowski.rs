//! Minkowski content of the interaction zone and the constant `kappa`.

use anyhow::Result;
use serde_json::json;

use manl_core::annihilation::calibrate_kappa;

use super::{num, Analysis, Check, Outcome, Table};
use crate::campaign::Campaign;
use crate::config::{ExperimentKind, MinkowskiParams, ModelConfig};

pub struct Minkowski {
    params: MinkowskiParams,
}

impl Minkowski {
    pub fn new(params: MinkowskiParams) -> Self {
        Minkowski { params }
    }
}

pub fn default_deltas(d: usize) -> Vec<f64> {
    match d {
        1 => vec![0.16, 0.08, 0.04, 0.02, 0.01],
        _ => vec![0.16, 0.08, 0.04, 0.02],
    }
}

impl Analysis for Minkowski {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Minkowski
    }

    fn prepare(&mut self, _model: &ModelConfig, _campaign: &mut Campaign) -> Result<()> {
        Ok(())
    }

    fn finish(&mut self, model: &ModelConfig, _campaign: &Campaign) -> Result<Outcome> {
        let d = model.sim.d;
        let deltas = if self.params.deltas.is_empty() { default_deltas(d) } else { self.params.deltas.clone() };
        let cal = calibrate_kappa(d, &deltas, &self.params.quadrature)?;
        let mut table = Table::new("minkowski.csv", &["delta", "ratio", "increment"]);
        for r in &cal.rows {
            table.push(vec![num(r.delta), num(r.ratio), r.increment.map(num).unwrap_or_default()]);
        }
        let mut checks = vec![];
        let last = cal.rows.last().expect("calibration has rows");
        if d == 1 {
            checks.push(Check::at_most(4, format!("|R - 1/4| at delta = {}, d=1", last.delta), (last.ratio - 0.25).abs(), 0.005));
        } else {
            // Relative increment between delta = 0.04 and 0.02 when both are present, else the last two.
            let pick = |v: f64| cal.rows.iter().position(|r| (r.delta - v).abs() < 1e-12);
            let (i, j) = match (pick(0.04), pick(0.02)) {
                (Some(i), Some(j)) => (i, j),
                _ => (cal.rows.len().saturating_sub(2), cal.rows.len() - 1),
            };
            let (a, b) = (cal.rows[i].ratio, cal.rows[j].ratio);
            checks.push(Check::at_most(
                4,
                format!("relative increment of R between delta = {} and {}, d={d}", cal.rows[i].delta, cal.rows[j].delta),
                (a - b).abs() / b.abs(),
                0.02,
            ));
        }
        Ok(Outcome {
            kind: self.kind(),
            tables: vec![table],
            summary_tables: vec!["minkowski.csv".into()],
            checks,
            summary: json!({
                "d": d,
                "kappa_calibrated": cal.kappa,
                "kappa_used": model.kappa(),
                "closed_form_limit": cal.closed_form_limit,
                "paper_value": cal.paper_value,
                "converged": cal.converged,
            }),
        })
    }
}
