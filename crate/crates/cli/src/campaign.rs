//! Shared particle runs. Analyses file requests; requests with the same group key are merged
//! into one plan and simulated once.

use anyhow::{anyhow, Result};
use serde::Serialize;

use manl_core::annihilation::AnnihilationKernel;
use manl_core::sim::{run_ensemble, Observation, ReplicaRecord, RunPlan, SimConfig, StepProbe};

use crate::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct GroupKey {
    pub n: usize,
    pub replicas: usize,
    #[serde(skip)]
    t_bits: u64,
    pub kernel_off: bool,
    /// Martingale tracking forces every particle onto the step grid.
    pub tracked: bool,
}

impl GroupKey {
    pub fn t_end(&self) -> f64 {
        f64::from_bits(self.t_bits)
    }
}

pub struct Request {
    pub n: usize,
    pub replicas: usize,
    pub t_end: f64,
    pub kernel_off: bool,
    pub plan: RunPlan,
}

/// Where one request's pieces sit inside its merged group plan.
#[derive(Clone, Copy, Debug)]
pub struct Handle {
    group: usize,
    obs: usize,
    tuples: usize,
    probes: usize,
    mart: usize,
}

struct Group {
    key: GroupKey,
    plan: RunPlan,
    records: Vec<ReplicaRecord>,
    sim: Option<SimConfig>,
    kernel: Option<AnnihilationKernel>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRecord {
    #[serde(flatten)]
    pub key: GroupKey,
    pub t_end: f64,
    pub seed: u64,
    pub steps: u64,
    pub dt: f64,
}

#[derive(Default)]
pub struct Campaign {
    groups: Vec<Group>,
}

fn union(into: &mut Vec<f64>, add: &[f64]) {
    into.extend_from_slice(add);
    into.sort_by(f64::total_cmp);
    into.dedup();
}

impl Campaign {
    pub fn add(&mut self, req: Request) -> Handle {
        let key = GroupKey {
            n: req.n,
            replicas: req.replicas,
            t_bits: req.t_end.to_bits(),
            kernel_off: req.kernel_off,
            tracked: !req.plan.martingale.is_empty(),
        };
        let group = match self.groups.iter().position(|g| g.key == key) {
            Some(i) => i,
            None => {
                self.groups.push(Group { key, plan: RunPlan::default(), records: vec![], sim: None, kernel: None });
                self.groups.len() - 1
            }
        };
        let plan = &mut self.groups[group].plan;
        let h = Handle {
            group,
            obs: plan.observables.len(),
            tuples: plan.tuples.len(),
            probes: plan.stepwise.len(),
            mart: plan.martingale.len(),
        };
        let mut p = req.plan;
        plan.observables.append(&mut p.observables);
        plan.tuples.append(&mut p.tuples);
        union(&mut plan.obs_times, &p.obs_times);
        union(&mut plan.marks, &p.marks);
        for probe in p.stepwise {
            plan.stepwise.push(match probe {
                StepProbe::PairProduct(k) => StepProbe::PairProduct(k + h.obs),
                other => other,
            });
        }
        plan.martingale.extend(p.martingale.iter().map(|k| k + h.obs));
        plan.keep_final |= p.keep_final;
        h
    }

    /// Simulates every group, in order of first request.
    pub fn run(&mut self, model: &ModelConfig, progress: &mut dyn FnMut(&str)) -> Result<()> {
        for g in &mut self.groups {
            if g.sim.is_some() {
                continue;
            }
            let sim = model.sim_for(g.key.n, g.key.replicas, g.key.t_end());
            let mut kernel = model.kernel_for(&sim)?;
            if g.key.kernel_off {
                kernel = kernel.switched_off();
            }
            progress(&format!(
                "simulating N = {}, {} replicas to t = {}{}{}",
                g.key.n,
                g.key.replicas,
                g.key.t_end(),
                if g.key.kernel_off { ", annihilation off" } else { "" },
                if g.key.tracked { ", martingale tracking" } else { "" }
            ));
            g.records = run_ensemble(&sim, &kernel, &g.plan)?;
            g.sim = Some(sim);
            g.kernel = Some(kernel);
        }
        Ok(())
    }

    pub fn view(&self, h: Handle) -> View<'_> {
        View { g: &self.groups[h.group], h }
    }

    pub fn seeds(&self) -> Vec<SeedRecord> {
        self.groups
            .iter()
            .filter_map(|g| {
                let sim = g.sim.as_ref()?;
                let (dt, steps) = sim.time_step();
                Some(SeedRecord { key: g.key, t_end: g.key.t_end(), seed: sim.seed, steps, dt })
            })
            .collect()
    }
}

/// One request's share of a simulated group.
pub struct View<'a> {
    g: &'a Group,
    h: Handle,
}

impl View<'_> {
    pub fn n(&self) -> usize {
        self.g.key.n
    }

    pub fn records(&self) -> &[ReplicaRecord] {
        &self.g.records
    }

    pub fn sim(&self) -> &SimConfig {
        self.g.sim.as_ref().expect("campaign has run")
    }

    pub fn kernel(&self) -> &AnnihilationKernel {
        self.g.kernel.as_ref().expect("campaign has run")
    }

    pub fn slot(&self, t: f64) -> Result<usize> {
        self.g.plan.obs_times.iter().position(|&u| u == t).ok_or_else(|| anyhow!("no observation at t = {t}"))
    }

    pub fn mark(&self, t: f64) -> Result<usize> {
        self.g.plan.marks.iter().position(|&u| u == t).ok_or_else(|| anyhow!("no mark at t = {t}"))
    }

    /// Grid time of the observation slot nearest `t`.
    pub fn grid_time(&self, t: f64) -> Result<f64> {
        let s = self.slot(t)?;
        Ok(self.g.records.first().map(|r| r.obs[s].time).unwrap_or(t))
    }

    pub fn observations(&self, t: f64, k: usize) -> Result<Vec<Observation>> {
        let s = self.slot(t)?;
        Ok(self.g.records.iter().map(|r| r.obs[s].values[self.h.obs + k]).collect())
    }

    pub fn pairings(&self, t: f64, k: usize) -> Result<Vec<f64>> {
        Ok(self.observations(t, k)?.iter().map(Observation::pairing).collect())
    }

    pub fn tuples(&self, t: f64, k: usize) -> Result<Vec<f64>> {
        let s = self.slot(t)?;
        Ok(self.g.records.iter().map(|r| r.obs[s].tuples[self.h.tuples + k]).collect())
    }

    /// Index of this request's step probe `k` in the merged plan.
    pub fn probe(&self, k: usize) -> usize {
        self.h.probes + k
    }

    /// Martingale path index of this request's tracked observable `k`.
    pub fn martingale(&self, k: usize) -> usize {
        self.h.mart + k
    }
}
