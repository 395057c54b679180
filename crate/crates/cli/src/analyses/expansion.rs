//! Second-order correlation expansion `F = A + B / N + o(1/N)` against tuple statistics.

use anyhow::Result;
use serde_json::json;

use manl_core::annihilation::AnnihilationKernel;
use manl_core::geometry::Species;
use manl_core::hierarchy::{compare_expansion, expansion_pairing, solve_hierarchy, ExpansionPairing, McCorrelation};
use manl_core::observable::{ObservablePair, TestFunction};
use manl_core::sim::{falling, init_system, ParticleEnsemble, ProductTest, RunPlan};
use manl_core::solvers::{horizon, initial_bound, solve_fn, FieldPair};
use manl_core::stats::mean_se;

use super::{field_pairing, num, shifted, Analysis, Check, Outcome, Table};
use crate::campaign::{Campaign, Handle, Request};
use crate::config::{ExpansionParams, ExperimentKind, ModelConfig, ToyParams};

/// `T0` of the model's solver.
pub fn solver_horizon(model: &ModelConfig) -> f64 {
    horizon(model.sim.t_end, initial_bound(&model.initial(), model.sim.d), &model.solver)
}

/// Each factor minus its mean under the normalised one-particle density of its species.
pub fn centred(f: &FieldPair, t: f64, test: &ProductTest) -> Result<ProductTest> {
    let idx = f.index_of(t)?;
    let shift = |s: Species, phi: &TestFunction| -> Result<TestFunction> {
        let obs = match s {
            Species::Plus => ObservablePair::new(phi.clone(), TestFunction::Zero),
            Species::Minus => ObservablePair::new(TestFunction::Zero, phi.clone()),
        };
        Ok(shifted(phi, field_pairing(f, t, &obs)? / f.mass(s, idx)))
    };
    Ok(ProductTest {
        plus: test.plus.iter().map(|p| shift(Species::Plus, p)).collect::<Result<_>>()?,
        minus: test.minus.iter().map(|p| shift(Species::Minus, p)).collect::<Result<_>>()?,
    })
}

/// `f_N` at the model's initial data, with `t` on its grid.
pub fn one_particle(model: &ModelConfig, kernel: &AnnihilationKernel, t: f64) -> Result<FieldPair> {
    Ok(solve_fn(kernel, &model.initial(), t, &[t], &model.solver)?)
}

/// Tests as run (centred when asked) and their `A`, `B` pairings at `t`.
pub fn expansion_terms(
    model: &ModelConfig,
    n: usize,
    tests: &[ProductTest],
    t: f64,
    centre: bool,
) -> Result<(Vec<ProductTest>, Vec<ExpansionPairing>)> {
    let kernel = model.kernel_at(n)?;
    let f = one_particle(model, &kernel, t)?;
    let run: Vec<ProductTest> =
        tests.iter().map(|p| if centre { centred(&f, t, p) } else { Ok(p.clone()) }).collect::<Result<_>>()?;
    let (triple, g) = solve_hierarchy(&kernel, &f, &model.solver)?;
    let terms = run.iter().map(|p| expansion_pairing(&f, &triple, &g, p, t)).collect::<Result<_, _>>()?;
    Ok((run, terms))
}

/// Ordered sum over distinct alive tuples, enumerated directly.
fn brute_tuples(ens: &ParticleEnsemble, test: &ProductTest) -> f64 {
    fn rec(vals: &[Vec<f64>], used: &mut Vec<usize>, acc: f64) -> f64 {
        let a = used.len();
        if a == vals.len() {
            return acc;
        }
        let mut s = 0.0;
        for i in 0..vals[a].len() {
            if used.contains(&i) {
                continue;
            }
            used.push(i);
            s += rec(vals, used, acc * vals[a][i]);
            used.pop();
        }
        s
    }
    let mut total = 1.0;
    for (s, factors) in [(Species::Plus, &test.plus), (Species::Minus, &test.minus)] {
        if factors.is_empty() {
            continue;
        }
        let alive: Vec<usize> = (0..ens.n_initial()).filter(|&i| ens.is_alive(s, i)).collect();
        let vals: Vec<Vec<f64>> =
            factors.iter().map(|f| alive.iter().map(|&i| f.value(ens.reference(s, i))).collect()).collect();
        total *= rec(&vals, &mut vec![], 1.0) / falling(ens.n_initial(), factors.len());
    }
    total
}

/// Fast tuple statistic against enumeration on small systems.
fn toy(model: &ModelConfig, params: &ToyParams, table: &mut Table) -> Result<f64> {
    let c = |k| TestFunction::cos(&[k], 1.0);
    let e = TestFunction::Exp { rate: vec![-3.0], amp: 1.0 };
    let g = TestFunction::Gaussian { center: vec![0.2], width: 0.3, amp: 1.0 };
    let tests = [
        ProductTest { plus: vec![c(1)], minus: vec![e.clone()] },
        ProductTest { plus: vec![c(1), e.clone()], minus: vec![] },
        ProductTest { plus: vec![g.clone(), c(2)], minus: vec![e.clone()] },
        ProductTest { plus: vec![c(1), g.clone()], minus: vec![e, c(3)] },
    ];
    let sim = model.sim_for(params.n, params.replicas, model.sim.t_end);
    let kernel = model.kernel_for(&sim)?;
    let (dt, steps) = sim.time_step();
    let mut worst: f64 = 0.0;
    for r in 0..params.replicas as u64 {
        let mut ens = init_system(&sim, r)?;
        for _ in 0..steps.min(200) {
            ens.step(&kernel, dt);
        }
        for (k, test) in tests.iter().enumerate() {
            let (fast, brute) = (ens.tuple_statistic(test), brute_tuples(&ens, test));
            let (a, b) = test.order();
            worst = worst.max((fast - brute).abs() / brute.abs().max(1.0));
            table.push(vec![
                r.to_string(),
                k.to_string(),
                format!("({a},{b})"),
                ens.alive_count().to_string(),
                num(fast),
                num(brute),
            ]);
        }
    }
    Ok(worst)
}

pub struct Expansion {
    params: ExpansionParams,
    t: f64,
    handle: Option<Handle>,
    run: Vec<ProductTest>,
    terms: Vec<ExpansionPairing>,
}

impl Expansion {
    pub fn new(params: ExpansionParams) -> Self {
        Expansion { params, t: 0.0, handle: None, run: vec![], terms: vec![] }
    }
}

impl Analysis for Expansion {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Expansion
    }

    fn prepare(&mut self, model: &ModelConfig, campaign: &mut Campaign) -> Result<()> {
        let n = self.params.n.unwrap_or(model.sim.n);
        let replicas = self.params.replicas.unwrap_or(model.sim.replicas);
        self.t = self.params.t.unwrap_or_else(|| solver_horizon(model) / 4.0);
        let (run, terms) = expansion_terms(model, n, &self.params.tests, self.t, self.params.centre)?;
        let plan = RunPlan { tuples: run.clone(), obs_times: vec![self.t], ..Default::default() };
        self.handle = Some(campaign.add(Request { n, replicas, t_end: self.t, kernel_off: false, plan }));
        self.run = run;
        self.terms = terms;
        Ok(())
    }

    fn finish(&mut self, model: &ModelConfig, campaign: &Campaign) -> Result<Outcome> {
        let t = self.t;
        let view = campaign.view(self.handle.expect("prepared"));
        let n = view.n();
        let mut mc = vec![];
        for k in 0..self.run.len() {
            mc.push(McCorrelation { t, n, estimate: mean_se(&view.tuples(t, k)?) });
        }
        let rows = compare_expansion(&mc, &self.terms, n)?;
        let mut table = Table::new(
            "expansion.csv",
            &["N", "t", "test_id", "order", "estimate", "se", "a", "b", "err_a", "err_b", "se_b"],
        );
        let mut checks = vec![];
        for (k, ((e, term), row)) in mc.iter().zip(&self.terms).zip(&rows).enumerate() {
            let (a, b) = self.run[k].order();
            table.push(vec![
                n.to_string(),
                num(t),
                k.to_string(),
                format!("({a},{b})"),
                num(e.estimate.value),
                num(e.estimate.se),
                num(term.a),
                num(term.b),
                num(row.err_a),
                num(row.err_b),
                num(row.se_b),
            ]);
            checks.push(Check::below(
                11,
                format!("test {k} ({a},{b}): |N (F - A) - B| at N = {n} vs 3 SE"),
                row.err_b,
                3.0 * row.se_b,
            ));
        }
        let mut toy_table = Table::new("expansion_toy.csv", &["replica", "test_id", "order", "alive", "fast", "brute"]);
        let worst = toy(model, &self.params.toy, &mut toy_table)?;
        checks.push(Check::below(
            11,
            format!("tuple statistic vs enumeration at N = {}", self.params.toy.n),
            worst,
            1e-12,
        ));
        Ok(Outcome {
            kind: self.kind(),
            tables: vec![table, toy_table],
            summary_tables: vec!["expansion.csv".into()],
            checks,
            summary: json!({ "t": t, "t0": solver_horizon(model), "terms": self.terms, "rows": rows }),
        })
    }
}
