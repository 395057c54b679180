//! The named experiments. Each one files simulation requests, then turns the shared records
//! into CSV tables and acceptance checks.

use anyhow::Result;
use serde::{Deserialize, Serialize};

use crate::campaign::Campaign;
use crate::config::{ExperimentKind, ModelConfig, Params};

mod bg;
mod chaos;
mod clt;
mod expansion;
mod hydro;
mod minkowski;
pub mod selftest;
mod tightness;

/// One thresholded quantity behind an acceptance criterion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: u32,
    pub label: String,
    pub value: f64,
    /// The rule, with its thresholds, as text.
    pub rule: String,
    pub passed: bool,
}

impl Check {
    pub fn at_most(criterion: u32, label: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { criterion, label: label.into(), value, rule: format!("<= {bound:.6e}"), passed: value <= bound }
    }

    pub fn below(criterion: u32, label: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { criterion, label: label.into(), value, rule: format!("< {bound:.6e}"), passed: value < bound }
    }

    pub fn at_least(criterion: u32, label: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { criterion, label: label.into(), value, rule: format!(">= {bound:.6e}"), passed: value >= bound }
    }

    pub fn within(criterion: u32, label: impl Into<String>, value: f64, lo: f64, hi: f64) -> Self {
        Check {
            criterion,
            label: label.into(),
            value,
            rule: format!("in [{lo}, {hi}]"),
            passed: (lo..=hi).contains(&value),
        }
    }

    pub fn holds(criterion: u32, label: impl Into<String>, value: f64, rule: impl Into<String>, passed: bool) -> Self {
        Check { criterion, label: label.into(), value, rule: rule.into(), passed }
    }
}

/// A CSV table built row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// Shortest round-trip form, in exponent notation away from unit scale.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e6).contains(&a) || !a.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Everything an experiment hands back.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub kind: ExperimentKind,
    /// Raw per-replica data first, then summary tables.
    pub tables: Vec<Table>,
    /// Names of the tables that `summarize` prints.
    pub summary_tables: Vec<String>,
    pub checks: Vec<Check>,
    pub summary: serde_json::Value,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub trait Analysis {
    fn kind(&self) -> ExperimentKind;
    /// Solves what the runs depend on and files the simulation requests.
    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()>;
    fn finish(&mut self, model: &ModelConfig, campaign: &Campaign) -> Result<Outcome>;
}

pub fn build(params: &Params) -> Box<dyn Analysis> {
    match params {
        Params::Selftest(p) => Box::new(selftest::Selftest::new(p.clone())),
        Params::Minkowski(p) => Box::new(minkowski::Minkowski::new(p.clone())),
        Params::Hydro(p) => Box::new(hydro::Hydro::new(p.clone())),
        Params::Clt(p) => Box::new(clt::Clt::new(p.clone())),
        Params::Chaos(p) => Box::new(chaos::Chaos::new(p.clone())),
        Params::Expansion(p) => Box::new(expansion::Expansion::new(p.clone())),
        Params::Tightness(p) => Box::new(tightness::Tightness::new(p.clone())),
        Params::Bg(p) => Box::new(bg::Bg::new(p.clone())),
    }
}

/// Prepares every analysis, runs the merged campaign once and collects the outcomes.
pub fn execute(
    model: &ModelConfig,
    params: &[Params],
    progress: &mut dyn FnMut(&str),
) -> Result<(Vec<Outcome>, Campaign)> {
    let mut analyses: Vec<Box<dyn Analysis>> = params.iter().map(build).collect();
    let mut campaign = Campaign::default();
    for a in analyses.iter_mut() {
        progress(&format!("preparing {}", a.kind().name()));
        a.prepare(model, &mut campaign)?;
    }
    campaign.run(model, progress)?;
    let mut out = Vec::with_capacity(analyses.len());
    for a in analyses.iter_mut() {
        progress(&format!("analysing {}", a.kind().name()));
        out.push(a.finish(model, &campaign)?);
    }
    Ok((out, campaign))
}

/// `phi - c` for a test function.
pub fn shifted(phi: &manl_core::observable::TestFunction, c: f64) -> manl_core::observable::TestFunction {
    use manl_core::observable::TestFunction;
    TestFunction::Sum { terms: vec![phi.clone(), TestFunction::constant(-c)] }
}

/// `∫ f` over the reference box, on a tensor Gauss grid fine enough for the solver fields.
pub fn box_integral(d: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
    let panels = match d {
        1 => 256,
        2 => 32,
        _ => 6,
    };
    manl_core::observable::tensor_integral(d, panels, f)
}

/// Observation times of a run, snapped to its step grid as the engine does.
pub fn snapped(sim: &manl_core::sim::SimConfig, t: f64) -> f64 {
    let (dt, _) = sim.time_step();
    sim.step_of(t) as f64 * dt
}

/// `<phi+, u+(t)> + <phi-, u-(t)>` for a solver field, with `phi` projected onto the field's basis.
pub fn field_pairing(
    u: &manl_core::solvers::FieldPair,
    t: f64,
    obs: &manl_core::observable::ObservablePair,
) -> Result<f64> {
    use manl_core::geometry::Species;
    let idx = u.index_of(t)?;
    let panels = (u.basis.kmax + 1).div_ceil(4) + 2;
    let mut v = 0.0;
    for s in Species::BOTH {
        let f = obs.of(s);
        let c = u.basis.project(&|x| f.value(x), panels, 8);
        v += u.pairing(s, idx, &c);
    }
    Ok(v)
}

/// Model replicas and horizon unless overridden.
pub fn scale(model: &ModelConfig, replicas: Option<usize>, t: Option<f64>) -> (usize, f64) {
    (replicas.unwrap_or(model.sim.replicas), t.unwrap_or(model.sim.t_end))
}
