//! Annihilating reflected Brownian particles in the two boxes.
//!
//! Positions are stored in reference coordinates, so both species live on
//! `[0,1]^d` with the interface at `x_d = 0`. Test functions and initial
//! densities are read in the same coordinates.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annihilation::{AnnihilationKernel, KernelProfile};
use crate::error::{invalid, Error, Result};
use crate::geometry::{fold_unit, mirror, reference_dist_sq, Species};
use crate::observable::{Density, ObservablePair, TestFunction};
use crate::quadrature::gauss_on;
use crate::solvers::FieldPair;
use crate::stats::{mean_se, second_moment_se, variance_se, Estimate};

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineOptions {
    /// Move particles far from the interface by single exact Gaussian leaps.
    pub leap: bool,
    /// A leap of duration `s` keeps `margin * sqrt(s)` clear of the zone.
    pub leap_margin: f64,
    pub min_leap_steps: u64,
    /// Find zone pairs with the all-pairs double loop.
    pub brute_force_pairs: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { leap: true, leap_margin: 8.5, min_leap_steps: 1, brute_force_pairs: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub d: usize,
    pub n: usize,
    #[serde(default = "one")]
    pub c_delta: f64,
    /// Requested step; defaults to the bound `delta^2 / 16`. Shrunk to divide `t_end`.
    #[serde(default)]
    pub dt: Option<f64>,
    pub t_end: f64,
    #[serde(default = "Density::uniform")]
    pub init_plus: Density,
    #[serde(default = "Density::uniform")]
    pub init_minus: Density,
    #[serde(default = "one_usize")]
    pub replicas: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub engine: EngineOptions,
}

impl SimConfig {
    pub fn new(d: usize, n: usize, t_end: f64) -> Self {
        SimConfig {
            d,
            n,
            c_delta: 1.0,
            dt: None,
            t_end,
            init_plus: Density::uniform(),
            init_minus: Density::uniform(),
            replicas: 1,
            seed: 0,
            engine: EngineOptions::default(),
        }
    }

    /// `delta_N = (c_delta / N)^{1/(2d)}`.
    pub fn delta(&self) -> f64 {
        (self.c_delta / self.n as f64).powf(1.0 / (2.0 * self.d as f64))
    }

    pub fn dt_bound(&self) -> f64 {
        let dl = self.delta();
        dl * dl / 16.0
    }

    pub fn kernel(&self) -> Result<AnnihilationKernel> {
        AnnihilationKernel::new(self.d, self.delta())
    }

    /// `(dt, steps)` with `steps * dt = t_end`.
    pub fn time_step(&self) -> (f64, u64) {
        let req = self.dt.unwrap_or_else(|| self.dt_bound());
        if self.t_end <= 0.0 {
            return (req, 0);
        }
        let mut steps = ((self.t_end / req) * (1.0 - 1e-12)).ceil().max(1.0) as u64;
        if self.t_end / steps as f64 > req {
            steps += 1;
        }
        (self.t_end / steps as f64, steps)
    }

    /// Step index nearest to `t`.
    pub fn step_of(&self, t: f64) -> u64 {
        let (dt, steps) = self.time_step();
        ((t / dt).round().max(0.0) as u64).min(steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if self.n < 2 {
            return Err(Error::Config(format!("N must be at least 2, got {}", self.n)));
        }
        if !(self.c_delta > 0.0 && self.c_delta.is_finite()) {
            return Err(Error::Config("c_delta must be positive".into()));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config("t_end must be a finite nonnegative time".into()));
        }
        if let Some(dt) = self.dt {
            let bound = self.dt_bound();
            if !(dt > 0.0) || dt > bound * (1.0 + 1e-12) {
                return Err(Error::Config(format!(
                    "dt = {dt} violates dt <= delta^2/16 = {bound} (delta = {})",
                    self.delta()
                )));
            }
        }
        if self.replicas == 0 {
            return Err(Error::Config("replicas must be positive".into()));
        }
        if !(self.engine.leap_margin > 0.0) {
            return Err(Error::Config("leap_margin must be positive".into()));
        }
        self.init_plus.validate(self.d)?;
        self.init_minus.validate(self.d)?;
        Ok(())
    }
}

fn stream(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// State of one replica.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    d: usize,
    n_initial: usize,
    time: f64,
    step: u64,
    seed: u64,
    replica: u64,
    pos: [Vec<f64>; 2],
    alive: [Vec<bool>; 2],
    alive_count: usize,
    rng: ChaCha8Rng,
}

impl PartialEq for ParticleEnsemble {
    fn eq(&self, o: &Self) -> bool {
        self.d == o.d
            && self.n_initial == o.n_initial
            && self.time.to_bits() == o.time.to_bits()
            && self.step == o.step
            && self.pos == o.pos
            && self.alive == o.alive
            && self.rng == o.rng
    }
}

/// `N` i.i.d. draws per species from the initial densities by rejection sampling.
pub fn init_system(cfg: &SimConfig, replica: u64) -> Result<ParticleEnsemble> {
    let d = cfg.d;
    if cfg.n < 1 {
        return Err(invalid("N must be positive"));
    }
    let mut rng = stream(cfg.seed, replica);
    let mut pos = [Vec::with_capacity(cfg.n * d), Vec::with_capacity(cfg.n * d)];
    for s in Species::BOTH {
        let density = match s {
            Species::Plus => &cfg.init_plus,
            Species::Minus => &cfg.init_minus,
        };
        density.validate(d)?;
        let (_, hi) = density.range(d);
        let bound = hi * 1.02 + 1e-12;
        if 1.0 / bound < 0.01 {
            return Err(invalid(format!(
                "rejection efficiency {:.4} below 1% for the {} density",
                1.0 / bound,
                s.name()
            )));
        }
        let mut x = vec![0.0; d];
        let (mut accepted, mut tried) = (0usize, 0u64);
        while accepted < cfg.n {
            for c in x.iter_mut() {
                *c = rng.random::<f64>();
            }
            let u: f64 = rng.random();
            tried += 1;
            if u * bound < density.value(&x) {
                pos[s.index()].extend_from_slice(&x);
                accepted += 1;
            } else if tried > 10_000 && (accepted as f64) < 0.01 * tried as f64 {
                return Err(invalid(format!("rejection efficiency below 1% for the {} density", s.name())));
            }
        }
    }
    Ok(ParticleEnsemble {
        d,
        n_initial: cfg.n,
        time: 0.0,
        step: 0,
        seed: cfg.seed,
        replica,
        pos,
        alive: [vec![true; cfg.n], vec![true; cfg.n]],
        alive_count: cfg.n,
        rng,
    })
}

impl ParticleEnsemble {
    /// Ensemble with prescribed reference positions, mainly for tests.
    pub fn from_positions(d: usize, plus: &[Vec<f64>], minus: &[Vec<f64>], seed: u64, replica: u64) -> Result<Self> {
        if plus.len() != minus.len() || plus.is_empty() {
            return Err(invalid("both species need the same positive number of particles"));
        }
        let mut pos = [Vec::new(), Vec::new()];
        for (k, list) in [plus, minus].iter().enumerate() {
            for p in list.iter() {
                if p.len() != d || p.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(invalid(format!("position {p:?} is not in [0,1]^{d}")));
                }
                pos[k].extend_from_slice(p);
            }
        }
        let n = plus.len();
        Ok(ParticleEnsemble {
            d,
            n_initial: n,
            time: 0.0,
            step: 0,
            seed,
            replica,
            pos,
            alive: [vec![true; n], vec![true; n]],
            alive_count: n,
            rng: stream(seed, replica),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_initial(&self) -> usize {
        self.n_initial
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn replica(&self) -> u64 {
        self.replica
    }

    /// Alive particles of either species (the two counts agree).
    pub fn alive_count(&self) -> usize {
        self.alive_count
    }

    pub fn count_alive(&self, s: Species) -> usize {
        self.alive[s.index()].iter().filter(|a| **a).count()
    }

    pub fn is_alive(&self, s: Species, i: usize) -> bool {
        self.alive[s.index()][i]
    }

    pub fn alive_flags(&self, s: Species) -> &[bool] {
        &self.alive[s.index()]
    }

    #[inline]
    pub fn reference(&self, s: Species, i: usize) -> &[f64] {
        &self.pos[s.index()][i * self.d..(i + 1) * self.d]
    }

    /// Physical position in `D+` or `D-`.
    pub fn position(&self, s: Species, i: usize) -> Vec<f64> {
        match s {
            Species::Plus => self.reference(s, i).to_vec(),
            Species::Minus => mirror(self.reference(s, i)),
        }
    }

    /// Physical positions of the alive particles.
    pub fn alive_positions(&self, s: Species) -> Vec<Vec<f64>> {
        (0..self.n_initial).filter(|&i| self.is_alive(s, i)).map(|i| self.position(s, i)).collect()
    }

    #[inline]
    fn normal(&self, s: usize, i: usize) -> f64 {
        self.pos[s][i * self.d + self.d - 1]
    }

    #[inline]
    fn diffuse(&mut self, s: usize, i: usize, var: f64) {
        let sd = var.sqrt();
        let d = self.d;
        for a in 0..d {
            let z: f64 = self.rng.sample(StandardNormal);
            let p = &mut self.pos[s][i * d + a];
            *p = fold_unit(*p + sd * z);
        }
    }

    fn kill(&mut self, i: u32, j: u32) -> bool {
        let (i, j) = (i as usize, j as usize);
        if self.alive[0][i] && self.alive[1][j] {
            self.alive[0][i] = false;
            self.alive[1][j] = false;
            self.alive_count -= 1;
            true
        } else {
            false
        }
    }

    /// Alive particles closer than `delta` to the interface, by ascending id.
    fn zone_candidates(&self, delta: f64) -> [Vec<u32>; 2] {
        let mut out = [Vec::new(), Vec::new()];
        for (s, list) in out.iter_mut().enumerate() {
            for i in 0..self.n_initial {
                if self.alive[s][i] && self.normal(s, i) < delta {
                    list.push(i as u32);
                }
            }
        }
        out
    }

    /// Alive pairs in the interaction zone.
    pub fn pair_set(&self, kernel: &AnnihilationKernel, brute_force: bool) -> PairSet {
        if brute_force {
            return PairSet::brute(self, kernel);
        }
        let c = self.zone_candidates(kernel.delta);
        PairSet::build(self, kernel, &c)
    }

    /// Competing exponential clocks of rate `ell / N` on every zone pair.
    fn annihilate(&mut self, pairs: &PairSet, kernel: &AnnihilationKernel, dt: f64) -> usize {
        let rmax = kernel.amplitude() / self.n_initial as f64;
        let total = pairs.len();
        if !(rmax > 0.0) || total == 0 {
            return 0;
        }
        let rdt = rmax * dt;
        let p = -(-rdt).exp_m1();
        let mut events: Vec<(f64, usize)> = Vec::new();
        let mut pos = 0usize;
        loop {
            let e: f64 = self.rng.sample(Exp1);
            let skip = (e / rdt).floor();
            if skip >= (total - pos) as f64 {
                break;
            }
            pos += skip as usize;
            let w = pairs.weight(pos);
            let u: f64 = self.rng.random();
            let mut tau = -(-u * p).ln_1p() / rmax;
            loop {
                if w >= 1.0 || self.rng.random::<f64>() < w {
                    events.push((tau, pos));
                    break;
                }
                let e2: f64 = self.rng.sample(Exp1);
                tau += e2 / rmax;
                if tau > dt {
                    break;
                }
            }
            pos += 1;
            if pos >= total {
                break;
            }
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut killed = 0;
        for (_, k) in events {
            let (i, j) = pairs.pair(k);
            if self.kill(i, j) {
                killed += 1;
            }
        }
        killed
    }

    /// One step: Gaussian moves folded into the boxes, then zone annihilations.
    /// Returns the number of annihilated pairs.
    pub fn step(&mut self, kernel: &AnnihilationKernel, dt: f64) -> usize {
        self.step_with(kernel, dt, false)
    }

    pub fn step_with(&mut self, kernel: &AnnihilationKernel, dt: f64, brute_force: bool) -> usize {
        for s in 0..2 {
            for i in 0..self.n_initial {
                if self.alive[s][i] {
                    self.diffuse(s, i, dt);
                }
            }
        }
        let pairs = self.pair_set(kernel, brute_force);
        let k = self.annihilate(&pairs, kernel, dt);
        self.step += 1;
        self.time += dt;
        k
    }

    /// The annihilation half of a step with positions held fixed.
    pub fn react(&mut self, kernel: &AnnihilationKernel, dt: f64) -> usize {
        let pairs = self.pair_set(kernel, false);
        self.annihilate(&pairs, kernel, dt)
    }

    /// Microscopic observables of `obs` at the current state.
    pub fn observe(&self, obs: &ObservablePair, kernel: &AnnihilationKernel) -> Observation {
        let pairs = self.pair_set(kernel, false);
        self.observe_with(obs, kernel, &pairs)
    }

    pub fn observe_with(&self, obs: &ObservablePair, kernel: &AnnihilationKernel, pairs: &PairSet) -> Observation {
        let n = self.n_initial as f64;
        let mut out = Observation::default();
        let mut grad_sq = 0.0;
        let mut g = vec![0.0; self.d];
        for s in Species::BOTH {
            let f = obs.of(s);
            let (mut val, mut lap) = (0.0, 0.0);
            for i in 0..self.n_initial {
                if !self.is_alive(s, i) {
                    continue;
                }
                let x = self.reference(s, i);
                g.iter_mut().for_each(|v| *v = 0.0);
                let (v, l) = f.jet(x, &mut g);
                val += v;
                lap += l;
                grad_sq += g.iter().map(|v| v * v).sum::<f64>();
            }
            match s {
                Species::Plus => out.pair_plus = val / n,
                Species::Minus => out.pair_minus = val / n,
            }
            out.half_laplacian += 0.5 * lap / n;
        }
        let amp = kernel.amplitude();
        let a = |i: u32| obs.plus.value(self.reference(Species::Plus, i as usize));
        let b = |j: u32| obs.minus.value(self.reference(Species::Minus, j as usize));
        out.pair_product = amp / (n * n) * pairs.sum_linear(a, b);
        let pair_sq = amp / (n * n) * pairs.sum_square(a, b);
        out.qv_rate = (grad_sq / n + pair_sq) / n;
        out
    }

    /// `sum over distinct alive tuples of the product test, / (N^(n) N^(m))`.
    pub fn tuple_statistic(&self, test: &ProductTest) -> f64 {
        let mut total = 1.0;
        for (s, factors) in [(Species::Plus, &test.plus), (Species::Minus, &test.minus)] {
            if factors.is_empty() {
                continue;
            }
            let idx: Vec<usize> = (0..self.n_initial).filter(|&i| self.is_alive(s, i)).collect();
            if idx.len() < factors.len() {
                return 0.0;
            }
            let values: Vec<Vec<f64>> =
                factors.iter().map(|f| idx.iter().map(|&i| f.value(self.reference(s, i))).collect()).collect();
            total *= distinct_tuple_sum(&values) / falling(self.n_initial, factors.len());
        }
        total
    }
}

/// Single-time observables of one pair of test functions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub pair_plus: f64,
    pub pair_minus: f64,
    pub pair_product: f64,
    pub qv_rate: f64,
    /// `<Δφ+/2, X+> + <Δφ-/2, X->`.
    pub half_laplacian: f64,
}

impl Observation {
    pub fn pairing(&self) -> f64 {
        self.pair_plus + self.pair_minus
    }

    /// Generator drift of the pairing.
    pub fn drift(&self) -> f64 {
        self.half_laplacian - self.pair_product
    }
}

/// Shape factor `ell / amplitude` in `[0, 1]`.
fn shape(profile: KernelProfile, delta: f64, r2: f64) -> f64 {
    if r2 >= delta * delta {
        return 0.0;
    }
    match profile {
        KernelProfile::Indicator => 1.0,
        KernelProfile::Ramp { inner } => {
            let r = r2.sqrt();
            let cut = inner * delta;
            if r <= cut {
                1.0
            } else {
                (delta - r) / (delta - cut)
            }
        }
    }
}

/// Pairs in the interaction zone, in canonical order: plus id ascending, then
/// partners by ascending normal coordinate and id.
#[derive(Clone, Debug)]
pub struct PairSet {
    inner: PairKind,
    total: usize,
}

#[derive(Clone, Debug)]
enum PairKind {
    /// d = 1 with a flat kernel: the partners of each plus particle are a prefix of `minus`.
    Prefix { plus: Vec<u32>, minus: Vec<u32>, counts: Vec<usize>, offsets: Vec<usize> },
    Explicit { pairs: Vec<(u32, u32)>, weights: Vec<f64> },
}

impl PairSet {
    pub fn empty() -> Self {
        PairSet { inner: PairKind::Explicit { pairs: vec![], weights: vec![] }, total: 0 }
    }

    fn build(ens: &ParticleEnsemble, kernel: &AnnihilationKernel, cand: &[Vec<u32>; 2]) -> Self {
        let delta = kernel.delta;
        if ens.d == 1 && kernel.profile == KernelProfile::Indicator {
            let mut keyed: Vec<(f64, u32)> = cand[1].iter().map(|&j| (ens.normal(1, j as usize), j)).collect();
            keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let minus: Vec<u32> = keyed.iter().map(|k| k.1).collect();
            let yv: Vec<f64> = keyed.iter().map(|k| k.0).collect();
            let d2 = delta * delta;
            let mut plus = Vec::with_capacity(cand[0].len());
            let mut counts = Vec::with_capacity(cand[0].len());
            for &i in &cand[0] {
                let x = ens.normal(0, i as usize);
                let c = yv.partition_point(|y| x * x + y * y < d2);
                if c > 0 {
                    plus.push(i);
                    counts.push(c);
                }
            }
            let mut offsets = Vec::with_capacity(counts.len());
            let mut total = 0;
            for c in &counts {
                offsets.push(total);
                total += c;
            }
            return PairSet { inner: PairKind::Prefix { plus, minus, counts, offsets }, total };
        }
        let d = ens.d;
        let h = std::f64::consts::SQRT_2 * delta;
        let cell = |x: &[f64]| -> Vec<i64> { x[..d - 1].iter().map(|v| (v / h).floor() as i64).collect() };
        let mut bins: HashMap<Vec<i64>, Vec<u32>> = HashMap::new();
        for &j in &cand[1] {
            bins.entry(cell(ens.reference(Species::Minus, j as usize))).or_default().push(j);
        }
        let mut found: Vec<(u32, u32, f64)> = Vec::new();
        let nb = 3usize.pow(d as u32 - 1);
        let mut key = vec![0i64; d - 1];
        for &i in &cand[0] {
            let x = ens.reference(Species::Plus, i as usize);
            let base = cell(x);
            for code in 0..nb {
                let mut r = code;
                for a in 0..d - 1 {
                    key[a] = base[a] + (r % 3) as i64 - 1;
                    r /= 3;
                }
                if let Some(list) = bins.get(&key) {
                    for &j in list {
                        let r2 = reference_dist_sq(x, ens.reference(Species::Minus, j as usize));
                        let w = shape(kernel.profile, delta, r2);
                        if w > 0.0 {
                            found.push((i, j, w));
                        }
                    }
                }
            }
        }
        Self::explicit(ens, found)
    }

    /// All alive pairs tested one by one.
    pub fn brute(ens: &ParticleEnsemble, kernel: &AnnihilationKernel) -> Self {
        let mut found = Vec::new();
        for i in 0..ens.n_initial {
            if !ens.is_alive(Species::Plus, i) {
                continue;
            }
            for j in 0..ens.n_initial {
                if !ens.is_alive(Species::Minus, j) {
                    continue;
                }
                let r2 = reference_dist_sq(ens.reference(Species::Plus, i), ens.reference(Species::Minus, j));
                let w = shape(kernel.profile, kernel.delta, r2);
                if w > 0.0 {
                    found.push((i as u32, j as u32, w));
                }
            }
        }
        if ens.d == 1 && kernel.profile == KernelProfile::Indicator {
            return Self::prefix_from(ens, found);
        }
        Self::explicit(ens, found)
    }

    /// In d = 1 each plus partner set is a prefix of the minus list sorted by height.
    fn prefix_from(ens: &ParticleEnsemble, found: Vec<(u32, u32, f64)>) -> Self {
        let mut keyed: Vec<(f64, u32)> = found.iter().map(|f| (ens.normal(1, f.1 as usize), f.1)).collect();
        keyed.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.dedup_by_key(|k| k.1);
        let minus: Vec<u32> = keyed.iter().map(|k| k.1).collect();
        let mut plus: Vec<u32> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for f in &found {
            if plus.last() == Some(&f.0) {
                *counts.last_mut().unwrap() += 1;
            } else {
                plus.push(f.0);
                counts.push(1);
            }
        }
        let mut offsets = Vec::with_capacity(counts.len());
        let mut total = 0;
        for c in &counts {
            offsets.push(total);
            total += c;
        }
        PairSet { inner: PairKind::Prefix { plus, minus, counts, offsets }, total }
    }

    fn explicit(ens: &ParticleEnsemble, mut found: Vec<(u32, u32, f64)>) -> Self {
        found.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(ens.normal(1, a.1 as usize).total_cmp(&ens.normal(1, b.1 as usize)))
                .then(a.1.cmp(&b.1))
        });
        let total = found.len();
        let pairs = found.iter().map(|p| (p.0, p.1)).collect();
        let weights = found.iter().map(|p| p.2).collect();
        PairSet { inner: PairKind::Explicit { pairs, weights }, total }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// The `k`-th pair `(plus id, minus id)`.
    pub fn pair(&self, k: usize) -> (u32, u32) {
        match &self.inner {
            PairKind::Prefix { plus, minus, offsets, .. } => {
                let p = offsets.partition_point(|&o| o <= k) - 1;
                (plus[p], minus[k - offsets[p]])
            }
            PairKind::Explicit { pairs, .. } => pairs[k],
        }
    }

    /// `ell / amplitude` for the `k`-th pair.
    pub fn weight(&self, k: usize) -> f64 {
        match &self.inner {
            PairKind::Prefix { .. } => 1.0,
            PairKind::Explicit { weights, .. } => weights[k],
        }
    }

    pub fn to_vec(&self) -> Vec<(u32, u32)> {
        (0..self.total).map(|k| self.pair(k)).collect()
    }

    /// `sum w (a_i + b_j)` over pairs.
    pub fn sum_linear(&self, a: impl Fn(u32) -> f64, b: impl Fn(u32) -> f64) -> f64 {
        match &self.inner {
            PairKind::Prefix { plus, minus, counts, .. } => {
                let mut s: f64 = plus.iter().zip(counts).map(|(&i, &c)| a(i) * c as f64).sum();
                let deg = degrees(counts, minus.len());
                for (&j, &dg) in minus.iter().zip(&deg) {
                    if dg > 0 {
                        s += b(j) * dg as f64;
                    }
                }
                s
            }
            PairKind::Explicit { pairs, weights } => {
                pairs.iter().zip(weights).map(|(&(i, j), w)| w * (a(i) + b(j))).sum()
            }
        }
    }

    /// `sum w (a_i + b_j)^2` over pairs.
    pub fn sum_square(&self, a: impl Fn(u32) -> f64, b: impl Fn(u32) -> f64) -> f64 {
        match &self.inner {
            PairKind::Prefix { plus, minus, counts, .. } => {
                let deg = degrees(counts, minus.len());
                let mut prefix = Vec::with_capacity(minus.len() + 1);
                prefix.push(0.0);
                let mut s = 0.0;
                let mut acc = 0.0;
                for (&j, &dg) in minus.iter().zip(&deg) {
                    let v = if dg > 0 { b(j) } else { 0.0 };
                    s += v * v * dg as f64;
                    acc += v;
                    prefix.push(acc);
                }
                for (&i, &c) in plus.iter().zip(counts) {
                    let v = a(i);
                    s += v * v * c as f64 + 2.0 * v * prefix[c];
                }
                s
            }
            PairKind::Explicit { pairs, weights } => pairs
                .iter()
                .zip(weights)
                .map(|(&(i, j), w)| {
                    let v = a(i) + b(j);
                    w * v * v
                })
                .sum(),
        }
    }
}

/// Number of plus partners of each position in the sorted minus list.
fn degrees(counts: &[usize], len: usize) -> Vec<usize> {
    let mut hist = vec![0usize; len + 1];
    for &c in counts {
        hist[c] += 1;
    }
    let mut deg = vec![0usize; len];
    let mut run = 0;
    for p in (0..len).rev() {
        run += hist[p + 1];
        deg[p] = run;
    }
    deg
}

/// `n (n-1) ... (n-k+1)`.
pub fn falling(n: usize, k: usize) -> f64 {
    (0..k).map(|i| (n - i) as f64).product()
}

/// Set partitions of `{0..n}` as lists of bit masks.
fn set_partitions(n: usize) -> Vec<Vec<u32>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for b in 0..cur.len() {
            cur[b] |= 1 << i;
            rec(i + 1, n, cur, out);
            cur[b] &= !(1 << i);
        }
        cur.push(1 << i);
        rec(i + 1, n, cur, out);
        cur.pop();
    }
    let mut out = Vec::new();
    rec(0, n, &mut Vec::new(), &mut out);
    out
}

/// `sum over distinct (i_1..i_n) of prod_a v_a(i_a)`, by inclusion-exclusion over power sums.
pub fn distinct_tuple_sum(values: &[Vec<f64>]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 1.0;
    }
    let len = values[0].len();
    let mut power = vec![0.0; 1 << n];
    for (mask, slot) in power.iter_mut().enumerate().skip(1) {
        *slot = (0..len)
            .map(|i| (0..n).filter(|a| mask >> a & 1 == 1).map(|a| values[a][i]).product::<f64>())
            .sum();
    }
    let mut total = 0.0;
    for part in set_partitions(n) {
        let mut term = 1.0;
        for &blk in &part {
            let k = blk.count_ones() as usize;
            let mobius = if k % 2 == 1 { 1.0 } else { -1.0 } * (1..k).product::<usize>() as f64;
            term *= mobius * power[blk as usize];
        }
        total += term;
    }
    total
}

/// Product test function `phi_1 x ... x phi_n  (x)  psi_1 x ... x psi_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductTest {
    #[serde(default)]
    pub plus: Vec<TestFunction>,
    #[serde(default)]
    pub minus: Vec<TestFunction>,
}

impl ProductTest {
    pub fn order(&self) -> (usize, usize) {
        (self.plus.len(), self.minus.len())
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let (n, m) = self.order();
        if n + m == 0 || n + m > 4 {
            return Err(invalid(format!("correlation order (n, m) = ({n}, {m}) needs 1 <= n + m <= 4")));
        }
        for f in self.plus.iter().chain(&self.minus) {
            f.validate(d)?;
        }
        Ok(())
    }
}

/// Monte Carlo estimate of `∫ Phi F^(n,m)_t`, optionally times a second
/// statistic of the same replicas at another time.
pub fn corr_estimate(
    ensembles: &[ParticleEnsemble],
    test: &ProductTest,
    second: Option<(&[ParticleEnsemble], &ProductTest)>,
) -> Result<Estimate> {
    if ensembles.len() < 100 {
        return Err(invalid(format!("correlation estimates need at least 100 replicas, got {}", ensembles.len())));
    }
    test.validate(ensembles[0].d)?;
    let first: Vec<f64> = ensembles.iter().map(|e| e.tuple_statistic(test)).collect();
    match second {
        None => Ok(mean_se(&first)),
        Some((later, test2)) => {
            test2.validate(ensembles[0].d)?;
            if later.len() != ensembles.len() {
                return Err(invalid("two-time estimate needs the same replicas at both times"));
            }
            let b: Vec<f64> = later.iter().map(|e| e.tuple_statistic(test2)).collect();
            corr_two_time(&first, &b)
        }
    }
}

/// `E[Phi(s) Psi(t)]` from per-replica statistics.
pub fn corr_two_time(first: &[f64], second: &[f64]) -> Result<Estimate> {
    if first.len() != second.len() || first.is_empty() {
        return Err(invalid("two-time statistics must pair up replica by replica"));
    }
    let prod: Vec<f64> = first.iter().zip(second).map(|(a, b)| a * b).collect();
    Ok(mean_se(&prod))
}

/// How fluctuation fields are centred.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Centering {
    /// Leave-one-out ensemble average.
    EnsembleMean,
    /// A deterministic mean from the solvers.
    SolverMean(Option<f64>),
}

/// `sqrt(N) (value_r - centre_r)` for each replica.
pub fn fluctuation_field(values: &[f64], n: usize, centering: Centering) -> Result<Vec<f64>> {
    let rn = (n as f64).sqrt();
    match centering {
        Centering::EnsembleMean => {
            let m = values.len();
            if m < 2 {
                return Err(invalid("ensemble centring needs at least two replicas"));
            }
            let total: f64 = values.iter().sum();
            Ok(values.iter().map(|v| rn * (v - (total - v) / (m - 1) as f64)).collect())
        }
        Centering::SolverMean(Some(c)) => Ok(values.iter().map(|v| rn * (v - c)).collect()),
        Centering::SolverMean(None) => Err(invalid("solver centring requested without a solver mean")),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MartingalePath {
    pub times: Vec<f64>,
    pub m_values: Vec<f64>,
    pub qv_values: Vec<f64>,
}

/// Running trapezoid sums behind `M^N_t` and `<M^N>_t`.
#[derive(Clone, Debug)]
struct MartingaleAcc {
    rn: f64,
    p0: f64,
    prev: Observation,
    drift: f64,
    qv: f64,
}

impl MartingaleAcc {
    fn new(n: usize, first: Observation) -> Self {
        MartingaleAcc { rn: (n as f64).sqrt(), p0: first.pairing(), prev: first, drift: 0.0, qv: 0.0 }
    }

    fn push(&mut self, next: Observation, dt: f64) {
        self.drift += 0.5 * dt * (self.prev.drift() + next.drift());
        self.qv += 0.5 * dt * (self.prev.qv_rate + next.qv_rate);
        self.prev = next;
    }

    fn m(&self) -> f64 {
        self.rn * (self.prev.pairing() - self.p0 - self.drift)
    }

    fn qv(&self) -> f64 {
        self.rn * self.rn * self.qv
    }
}

/// `M^N` and `<M^N>` along a trajectory observed on a uniform grid.
pub fn martingale_path(times: &[f64], trajectory: &[Observation], n: usize) -> Result<MartingalePath> {
    if times.len() != trajectory.len() || times.is_empty() {
        return Err(invalid("times and observations must have the same nonzero length"));
    }
    let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1e-300) {
            return Err(invalid("martingale path needs a uniform time grid"));
        }
    }
    let mut acc = MartingaleAcc::new(n, trajectory[0]);
    let mut path = MartingalePath { times: vec![times[0]], m_values: vec![0.0], qv_values: vec![0.0] };
    for (t, o) in times.iter().zip(trajectory).skip(1) {
        acc.push(*o, dt);
        path.times.push(*t);
        path.m_values.push(acc.m());
        path.qv_values.push(acc.qv());
    }
    Ok(path)
}

/// Values of a near-interface function `a_s(t, x_d)` on `x_d = delta sin(theta)`,
/// tabulated at increasing times and interpolated linearly. One-dimensional boxes only.
#[derive(Clone, Debug)]
pub struct ProjectionTable {
    times: Vec<f64>,
    delta: f64,
    n_theta: usize,
    values: [Vec<f64>; 2],
}

impl ProjectionTable {
    pub fn new(
        times: Vec<f64>,
        delta: f64,
        n_theta: usize,
        f: impl Fn(usize, Species, f64) -> f64,
    ) -> Result<Self> {
        if times.is_empty() || n_theta < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("projection table needs increasing times and at least two angles"));
        }
        let mut values = [Vec::new(), Vec::new()];
        for j in 0..times.len() {
            for s in Species::BOTH {
                for k in 0..n_theta {
                    let th = std::f64::consts::FRAC_PI_2 * k as f64 / (n_theta - 1) as f64;
                    values[s.index()].push(f(j, s, delta * th.sin()));
                }
            }
        }
        Ok(ProjectionTable { times, delta, n_theta, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn value(&self, s: Species, t: f64, xd: f64) -> f64 {
        if xd >= self.delta {
            return 0.0;
        }
        let th = (xd / self.delta).clamp(0.0, 1.0).asin() / std::f64::consts::FRAC_PI_2 * (self.n_theta - 1) as f64;
        let k = (th.floor() as usize).min(self.n_theta - 2);
        let fk = th - k as f64;
        let nt = self.times.len();
        let j = self.times.partition_point(|&u| u <= t).clamp(1, nt.max(2) - 1) - 1;
        let row = |j: usize| {
            let v = &self.values[s.index()][j * self.n_theta..(j + 1) * self.n_theta];
            v[k] * (1.0 - fk) + v[k + 1] * fk
        };
        if nt == 1 {
            return row(0);
        }
        let ft = ((t - self.times[j]) / (self.times[j + 1] - self.times[j])).clamp(0.0, 1.0);
        row(j) * (1.0 - ft) + row(j + 1) * ft
    }

    /// `a_+(x) = ∫ ell(x,y)(phi+(x) + phi-(y)) f-(y) dy` and its mirror, from a solved density.
    pub fn from_field(field: &FieldPair, kernel: &AnnihilationKernel, obs: &ObservablePair, n_theta: usize) -> Result<Self> {
        if kernel.d != 1 || field.basis.d != 1 {
            return Err(invalid("projection tables are implemented for d = 1"));
        }
        let dl = kernel.delta;
        let cuts: Vec<f64> = match kernel.profile {
            KernelProfile::Ramp { inner } if inner > 0.0 => vec![inner * dl],
            _ => vec![],
        };
        Self::new(field.times.clone(), dl, n_theta, |j, s, x| {
            let top = (dl * dl - x * x).max(0.0).sqrt();
            if top == 0.0 {
                return 0.0;
            }
            let other = s.other();
            let mut breaks = vec![0.0];
            for c in &cuts {
                let b2 = c * c - x * x;
                if b2 > 0.0 && b2.sqrt() < top {
                    breaks.push(b2.sqrt());
                }
            }
            breaks.push(top);
            let own = obs.of(s).value(&[x]);
            let mut acc = 0.0;
            for w in breaks.windows(2) {
                let (nodes, weights) = gauss_on(12, w[0], w[1]);
                for (y, wt) in nodes.iter().zip(&weights) {
                    let ell = kernel.of_dist_sq(x * x + y * y);
                    acc += wt * ell * (own + obs.of(other).value(&[*y])) * field.eval(other, j, &[*y]);
                }
            }
            acc
        })
    }
}

/// Quantities integrated in time along every step.
#[derive(Clone, Debug)]
pub enum StepProbe {
    /// `pair_product` of the observable with this index.
    PairProduct(usize),
    /// `<a_+(s), X+_s> + <a_-(s), X-_s>` for a near-interface table.
    Projection(Arc<ProjectionTable>),
}

/// What one replica run records.
#[derive(Clone, Debug, Default)]
pub struct RunPlan {
    pub observables: Vec<ObservablePair>,
    /// Times with full observations; all particles are synchronised there.
    pub obs_times: Vec<f64>,
    pub tuples: Vec<ProductTest>,
    /// Times at which the running step integrals are recorded.
    pub marks: Vec<f64>,
    pub stepwise: Vec<StepProbe>,
    /// Observables whose martingale path is tracked at the marks (turns leaps off).
    pub martingale: Vec<usize>,
    pub keep_final: bool,
}

impl RunPlan {
    fn validate(&self, cfg: &SimConfig) -> Result<()> {
        for o in &self.observables {
            o.validate(cfg.d)?;
        }
        for t in &self.tuples {
            t.validate(cfg.d)?;
        }
        for w in self.obs_times.windows(2).chain(self.marks.windows(2)) {
            if w[1] < w[0] {
                return Err(invalid("observation and mark times must be sorted"));
            }
        }
        for t in self.obs_times.iter().chain(&self.marks) {
            if !(0.0..=cfg.t_end * (1.0 + 1e-12)).contains(t) {
                return Err(invalid(format!("time {t} outside [0, {}]", cfg.t_end)));
            }
        }
        for p in &self.stepwise {
            match p {
                StepProbe::PairProduct(k) if *k >= self.observables.len() => {
                    return Err(invalid(format!("no observable {k} for a pair-product probe")));
                }
                StepProbe::Projection(_) if cfg.d != 1 => {
                    return Err(invalid("projection probes are implemented for d = 1"));
                }
                _ => {}
            }
        }
        if self.martingale.iter().any(|k| *k >= self.observables.len()) {
            return Err(invalid("martingale index out of range"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub time: f64,
    pub alive: usize,
    pub values: Vec<Observation>,
    pub tuples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkRecord {
    pub time: f64,
    /// `∫_0^time` of each step probe, trapezoid in the step grid.
    pub integrals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ReplicaRecord {
    pub replica: u64,
    pub obs: Vec<ObsRecord>,
    pub marks: Vec<MarkRecord>,
    pub martingale: Vec<MartingalePath>,
    pub events: u64,
    pub final_state: Option<ParticleEnsemble>,
}

const NONE: u32 = u32::MAX;

/// Stepper with optional far-field leaps.
struct Engine<'k> {
    ens: ParticleEnsemble,
    kernel: &'k AnnihilationKernel,
    dt: f64,
    total: u64,
    leap: bool,
    margin: f64,
    min_leap: u64,
    brute: bool,
    syncs: Vec<u64>,
    clock: [Vec<u64>; 2],
    near: [Vec<u32>; 2],
    /// Far particles by wake-up step, as intrusive lists through `next`.
    head: [Vec<u32>; 2],
    next: [Vec<u32>; 2],
    cands: [Vec<u32>; 2],
    pairs: PairSet,
}

impl<'k> Engine<'k> {
    fn new(
        ens: ParticleEnsemble,
        kernel: &'k AnnihilationKernel,
        dt: f64,
        total: u64,
        opts: &EngineOptions,
        leap: bool,
        mut syncs: Vec<u64>,
    ) -> Self {
        syncs.push(total);
        syncs.sort_unstable();
        syncs.dedup();
        let n = ens.n_initial;
        let mut e = Engine {
            ens,
            kernel,
            dt,
            total,
            leap,
            margin: opts.leap_margin,
            min_leap: opts.min_leap_steps.max(1),
            brute: opts.brute_force_pairs,
            syncs,
            clock: [vec![0; n], vec![0; n]],
            near: [Vec::new(), Vec::new()],
            head: if leap { [vec![NONE; total as usize + 1], vec![NONE; total as usize + 1]] } else { [vec![], vec![]] },
            next: if leap { [vec![NONE; n], vec![NONE; n]] } else { [vec![], vec![]] },
            cands: [Vec::new(), Vec::new()],
            pairs: PairSet::empty(),
        };
        let now = e.ens.step;
        for s in 0..2 {
            e.clock[s].iter_mut().for_each(|c| *c = now);
            let all: Vec<u32> = (0..n as u32).filter(|&i| e.ens.alive[s][i as usize]).collect();
            e.near[s] = e.classify(s, all, now);
        }
        e.refresh_pairs();
        e
    }

    fn next_sync_after(&self, k: u64) -> u64 {
        let p = self.syncs.partition_point(|&s| s <= k);
        self.syncs.get(p).copied().unwrap_or(self.total)
    }

    /// Sends far particles to the wheel and returns the rest in their given order.
    fn classify(&mut self, s: usize, mut ids: Vec<u32>, now: u64) -> Vec<u32> {
        if !self.leap {
            return ids;
        }
        let cap = self.next_sync_after(now).saturating_sub(now);
        if cap == 0 {
            return ids;
        }
        let scale = 1.0 / (self.margin * self.margin * self.dt);
        let off = self.kernel.amplitude() == 0.0;
        let mut keep = 0;
        for k in 0..ids.len() {
            let i = ids[k];
            let gap = self.ens.normal(s, i as usize) - self.kernel.delta;
            let steps = if off {
                cap
            } else if gap > 0.0 {
                (gap * gap * scale) as u64
            } else {
                0
            };
            if steps >= self.min_leap {
                let w = (now + steps.min(cap)) as usize;
                self.next[s][i as usize] = self.head[s][w];
                self.head[s][w] = i;
            } else {
                ids[keep] = i;
                keep += 1;
            }
        }
        ids.truncate(keep);
        ids
    }

    fn refresh_pairs(&mut self) {
        let delta = self.kernel.delta;
        for s in 0..2 {
            self.cands[s] = self.near[s]
                .iter()
                .copied()
                .filter(|&i| self.ens.alive[s][i as usize] && self.ens.normal(s, i as usize) < delta)
                .collect();
            self.cands[s].sort_unstable();
        }
        self.pairs =
            if self.brute { PairSet::brute(&self.ens, self.kernel) } else { PairSet::build(&self.ens, self.kernel, &self.cands) };
    }

    fn advance(&mut self) -> usize {
        let now = self.ens.step + 1;
        for s in 0..2 {
            let mut near = std::mem::take(&mut self.near[s]);
            near.retain(|&i| self.ens.alive[s][i as usize]);
            for &i in &near {
                self.ens.diffuse(s, i as usize, self.dt);
                self.clock[s][i as usize] = now;
            }
            if self.leap {
                let mut i = std::mem::replace(&mut self.head[s][now as usize], NONE);
                while i != NONE {
                    let iu = i as usize;
                    let var = (now - self.clock[s][iu]) as f64 * self.dt;
                    self.ens.diffuse(s, iu, var);
                    self.clock[s][iu] = now;
                    near.push(i);
                    i = self.next[s][iu];
                }
            }
            self.near[s] = self.classify(s, near, now);
        }
        self.refresh_pairs();
        let killed = self.ens.annihilate(&self.pairs, self.kernel, self.dt);
        if killed > 0 {
            for s in 0..2 {
                let alive = &self.ens.alive[s];
                self.near[s].retain(|&i| alive[i as usize]);
            }
            self.refresh_pairs();
        }
        // Accumulated like `step`, so both paths agree to the bit.
        self.ens.time += (now - self.ens.step) as f64 * self.dt;
        self.ens.step = now;
        killed
    }

    fn probe(&self, p: &StepProbe, observables: &[ObservablePair]) -> f64 {
        let n = self.ens.n_initial as f64;
        match p {
            StepProbe::PairProduct(k) => {
                let obs = &observables[*k];
                let a = |i: u32| obs.plus.value(self.ens.reference(Species::Plus, i as usize));
                let b = |j: u32| obs.minus.value(self.ens.reference(Species::Minus, j as usize));
                self.kernel.amplitude() / (n * n) * self.pairs.sum_linear(a, b)
            }
            StepProbe::Projection(table) => {
                let t = self.ens.time;
                let mut acc = 0.0;
                for s in Species::BOTH {
                    for &i in &self.cands[s.index()] {
                        acc += table.value(s, t, self.ens.normal(s.index(), i as usize));
                    }
                }
                acc / n
            }
        }
    }
}

/// Runs one replica through the plan.
pub fn run_replica(cfg: &SimConfig, kernel: &AnnihilationKernel, plan: &RunPlan, replica: u64) -> Result<ReplicaRecord> {
    let (dt, total) = cfg.time_step();
    let obs_steps: Vec<u64> = plan.obs_times.iter().map(|&t| cfg.step_of(t)).collect();
    let mark_steps: Vec<u64> = plan.marks.iter().map(|&t| cfg.step_of(t)).collect();
    let ens = init_system(cfg, replica)?;
    let leap = cfg.engine.leap && plan.martingale.is_empty();
    let mut eng = Engine::new(ens, kernel, dt, total, &cfg.engine, leap, obs_steps.clone());

    let mut rec = ReplicaRecord {
        replica,
        obs: Vec::with_capacity(obs_steps.len()),
        marks: Vec::with_capacity(mark_steps.len()),
        martingale: vec![MartingalePath::default(); plan.martingale.len()],
        events: 0,
        final_state: None,
    };
    let mut cur: Vec<f64> = plan.stepwise.iter().map(|p| eng.probe(p, &plan.observables)).collect();
    let mut cum = vec![0.0; cur.len()];
    let mut mart: Vec<MartingaleAcc> = plan
        .martingale
        .iter()
        .map(|&k| MartingaleAcc::new(cfg.n, eng.ens.observe_with(&plan.observables[k], kernel, &eng.pairs)))
        .collect();
    let (mut oi, mut mi) = (0, 0);
    for k in 0..=total {
        if k > 0 {
            rec.events += eng.advance() as u64;
            for (j, p) in plan.stepwise.iter().enumerate() {
                let v = eng.probe(p, &plan.observables);
                cum[j] += 0.5 * dt * (cur[j] + v);
                cur[j] = v;
            }
            for (acc, &o) in mart.iter_mut().zip(&plan.martingale) {
                acc.push(eng.ens.observe_with(&plan.observables[o], kernel, &eng.pairs), dt);
            }
        }
        let now = k as f64 * dt;
        while mi < mark_steps.len() && mark_steps[mi] == k {
            rec.marks.push(MarkRecord { time: now, integrals: cum.clone() });
            for (path, acc) in rec.martingale.iter_mut().zip(&mart) {
                path.times.push(now);
                path.m_values.push(acc.m());
                path.qv_values.push(acc.qv());
            }
            mi += 1;
        }
        while oi < obs_steps.len() && obs_steps[oi] == k {
            rec.obs.push(ObsRecord {
                time: now,
                alive: eng.ens.alive_count,
                values: plan.observables.iter().map(|o| eng.ens.observe_with(o, kernel, &eng.pairs)).collect(),
                tuples: plan.tuples.iter().map(|t| eng.ens.tuple_statistic(t)).collect(),
            });
            oi += 1;
        }
    }
    if plan.keep_final {
        rec.final_state = Some(eng.ens);
    }
    Ok(rec)
}

/// All replicas of `cfg`, in parallel, returned in replica order.
pub fn run_ensemble(cfg: &SimConfig, kernel: &AnnihilationKernel, plan: &RunPlan) -> Result<Vec<ReplicaRecord>> {
    cfg.validate()?;
    plan.validate(cfg)?;
    if kernel.d != cfg.d {
        return Err(invalid("kernel and configuration dimensions differ"));
    }
    (0..cfg.replicas as u64).into_par_iter().map(|r| run_replica(cfg, kernel, plan, r)).collect()
}

/// Per-replica observation `k` at observation slot `slot`.
pub fn observations(records: &[ReplicaRecord], slot: usize, k: usize) -> Vec<Observation> {
    records.iter().map(|r| r.obs[slot].values[k]).collect()
}

/// Per-replica value of tuple statistic `k` at observation slot `slot`.
pub fn tuple_values(records: &[ReplicaRecord], slot: usize, k: usize) -> Vec<f64> {
    records.iter().map(|r| r.obs[slot].tuples[k]).collect()
}

/// Integral of step probe `p` between marks `a` and `b`, per replica.
pub fn window_integrals(records: &[ReplicaRecord], p: usize, a: usize, b: usize) -> Vec<f64> {
    records.iter().map(|r| r.marks[b].integrals[p] - r.marks[a].integrals[p]).collect()
}

/// `E[(sqrt(N) ∫_a^b (pair_product - E pair_product) dr)^2]` for pair-product probe `p`.
pub fn tightness(records: &[ReplicaRecord], n: usize, p: usize, a: usize, b: usize) -> Estimate {
    let v = variance_se(&window_integrals(records, p, a, b));
    Estimate::new(n as f64 * v.value, n as f64 * v.se)
}

/// `E|∫_0^t (B^N_s Z^N_s - K^N_s) ds|^2` at mark `mark`, from a projection probe and a
/// pair-product probe. `K` is centred by its ensemble mean; `Z` per `centering`, where a
/// solver mean is `∫_0^t <a_s, f_s> ds`.
pub fn bg_residual(
    records: &[ReplicaRecord],
    n: usize,
    projection: usize,
    pair_product: usize,
    mark: usize,
    centering: Centering,
) -> Result<Estimate> {
    if records.len() < 2 {
        return Err(invalid("residual needs at least two replicas"));
    }
    let bz: Vec<f64> = records.iter().map(|r| r.marks[mark].integrals[projection]).collect();
    let k: Vec<f64> = records.iter().map(|r| r.marks[mark].integrals[pair_product]).collect();
    let nf = n as f64;
    match centering {
        Centering::EnsembleMean => {
            let diff: Vec<f64> = bz.iter().zip(&k).map(|(a, b)| a - b).collect();
            let v = variance_se(&diff);
            Ok(Estimate::new(nf * v.value, nf * v.se))
        }
        Centering::SolverMean(c) => {
            let c = c.ok_or_else(|| invalid("solver centring requested without a solver mean"))?;
            let mk = k.iter().sum::<f64>() / k.len() as f64;
            let diff: Vec<f64> = bz.iter().zip(&k).map(|(a, b)| (a - c) - (b - mk)).collect();
            let v = second_moment_se(&diff);
            Ok(Estimate::new(nf * v.value, nf * v.se))
        }
    }
}

/// `replica,time,observable_id,value` rows of the pairings.
pub fn dump_csv(records: &[ReplicaRecord]) -> String {
    let mut s = String::from("replica,time,observable_id,value\n");
    for r in records {
        for o in &r.obs {
            for (k, v) in o.values.iter().enumerate() {
                s.push_str(&format!("{},{},{},{:.17e}\n", r.replica, o.time, k, v.pairing()));
            }
        }
    }
    s
}

const MAGIC: &[u8; 8] = b"MANL1\0\0\0";

/// Binary snapshot: magic, little-endian header, alive flags and reference positions.
pub fn write_snapshot(ens: &ParticleEnsemble, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    for v in [ens.d as u64, ens.n_initial as u64, ens.seed, ens.replica, ens.step] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&ens.time.to_le_bytes());
    buf.extend_from_slice(&ens.rng.get_word_pos().to_le_bytes());
    for s in 0..2 {
        buf.extend(ens.alive[s].iter().map(|&a| a as u8));
        for p in &ens.pos[s] {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<ParticleEnsemble> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = || invalid(format!("{} is not a valid snapshot", path.display()));
    if buf.len() < 8 + 48 + 16 || &buf[..8] != MAGIC {
        return Err(bad());
    }
    let mut at = 8;
    let mut u64s = [0u64; 5];
    for v in u64s.iter_mut() {
        *v = u64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
        at += 8;
    }
    let [d, n, seed, replica, step] = u64s;
    let (d, n) = (d as usize, n as usize);
    let time = f64::from_le_bytes(buf[at..at + 8].try_into().unwrap());
    at += 8;
    let word = u128::from_le_bytes(buf[at..at + 16].try_into().unwrap());
    at += 16;
    if d == 0 || buf.len() != at + 2 * (n + 8 * n * d) {
        return Err(bad());
    }
    let mut alive = [Vec::new(), Vec::new()];
    let mut pos = [Vec::new(), Vec::new()];
    for s in 0..2 {
        alive[s] = buf[at..at + n].iter().map(|&b| b != 0).collect();
        at += n;
        pos[s] = (0..n * d).map(|k| f64::from_le_bytes(buf[at + 8 * k..at + 8 * k + 8].try_into().unwrap())).collect();
        at += 8 * n * d;
    }
    let alive_count = alive[0].iter().filter(|a| **a).count();
    if alive_count != alive[1].iter().filter(|a| **a).count() {
        return Err(bad());
    }
    let mut rng = stream(seed, replica);
    rng.set_word_pos(word);
    Ok(ParticleEnsemble { d, n_initial: n, time, step, seed, replica, pos, alive, alive_count, rng })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_bell_numbers() {
        let counts: Vec<usize> = (1..=4).map(|n| set_partitions(n).len()).collect();
        assert_eq!(counts, vec![1, 2, 5, 15]);
    }

    #[test]
    fn distinct_sums_match_enumeration() {
        let v: Vec<Vec<f64>> = (0..3).map(|a| (0..5).map(|i| ((a * 7 + i * 3) % 11) as f64 - 4.0).collect()).collect();
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..5 {
                    if i != j && j != k && i != k {
                        brute += v[0][i] * v[1][j] * v[2][k];
                    }
                }
            }
        }
        assert!((distinct_tuple_sum(&v) - brute).abs() < 1e-9);
    }

    #[test]
    fn degree_histogram() {
        assert_eq!(degrees(&[3, 1, 2], 3), vec![3, 2, 1]);
    }
}
