use std::f64::consts::PI;

use manl_core::annihilation::{AnnihilationKernel, KernelProfile};
use manl_core::geometry::{DomainPair, Species};
use manl_core::observable::{Density, ObservablePair, TestFunction};
use manl_core::sim::*;
use manl_core::stats::{mean_se, variance_se};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cos1(k: usize, amp: f64) -> TestFunction {
    TestFunction::cos(&[k], amp)
}

fn near_interface(d: usize, n: usize, band: f64, seed: u64) -> ParticleEnsemble {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = || -> Vec<f64> {
        let mut x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        x[d - 1] *= band;
        x
    };
    let plus: Vec<Vec<f64>> = (0..n).map(|_| pick()).collect();
    let minus: Vec<Vec<f64>> = (0..n).map(|_| pick()).collect();
    ParticleEnsemble::from_positions(d, &plus, &minus, seed, 0).unwrap()
}

/// Upper regularised incomplete gamma `Q(a, x)`.
fn gamma_q(a: f64, x: f64) -> f64 {
    fn ln_gamma(z: f64) -> f64 {
        let g = [
            676.5203681218851,
            -1259.1392167224028,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507343278686905,
            -0.13857109526572012,
            9.984_369_578_019_572e-6,
            1.5056327351493116e-7,
        ];
        let z = z - 1.0;
        let mut s = 0.999_999_999_999_809_9;
        for (i, c) in g.iter().enumerate() {
            s += c / (z + i as f64 + 1.0);
        }
        let t = z + 7.5;
        0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + s.ln()
    }
    if x < a + 1.0 {
        let (mut sum, mut term, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
        }
        1.0 - sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1e300;
        let mut dd = 1.0 / b;
        let mut h = dd;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            dd = an * dd + b;
            c = b + an / c;
            dd = 1.0 / dd;
            h *= dd * c;
        }
        (-x + a * x.ln() - ln_gamma(a)).exp() * h
    }
}

#[test]
fn config_rules() {
    let cfg = SimConfig::new(1, 1000, 0.25);
    assert!((cfg.n as f64 * cfg.delta().powi(2) - 1.0).abs() < 1e-12);
    let cfg2 = SimConfig::new(2, 1000, 0.25);
    assert!((1000.0 * cfg2.delta().powi(4) - 1.0).abs() < 1e-12);
    let (dt, steps) = cfg.time_step();
    assert!(dt <= cfg.dt_bound() && (dt * steps as f64 - 0.25).abs() < 1e-12);
    let mut bad = cfg.clone();
    bad.dt = Some(cfg.dt_bound() * 1.5);
    let msg = bad.validate().unwrap_err().to_string();
    assert!(msg.contains("delta^2/16"), "{msg}");
    let mut lopsided = cfg.clone();
    lopsided.init_plus = Density { profile: TestFunction::constant(2.0) };
    assert!(lopsided.validate().is_err());
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<SimConfig>(&json).unwrap(), cfg);
    assert!(serde_json::from_str::<SimConfig>(r#"{"d":1,"n":10,"t_end":0.1,"bogus":1}"#).is_err());
}

#[test]
fn uniform_initial_moments_and_determinism() {
    let mut cfg = SimConfig::new(2, 4000, 0.1);
    cfg.seed = 11;
    let e = init_system(&cfg, 3).unwrap();
    let tol = 3.0 / (12.0 * cfg.n as f64).sqrt();
    for s in Species::BOTH {
        let pts = e.alive_positions(s);
        for a in 0..2 {
            let m: f64 = pts.iter().map(|p| p[a].abs()).sum::<f64>() / pts.len() as f64;
            assert!((m - 0.5).abs() < tol, "{s:?} axis {a}: {m}");
        }
    }
    assert!(e.alive_positions(Species::Minus).iter().all(|p| p[1] <= 0.0));
    assert_eq!(init_system(&cfg, 3).unwrap(), e);
    assert_ne!(init_system(&cfg, 4).unwrap(), e);
}

#[test]
fn rejection_sampling_matches_linear_cdf() {
    let mut cfg = SimConfig::new(1, 100_000, 0.1);
    cfg.init_plus = Density { profile: TestFunction::Linear { constant: 0.0, coeffs: vec![2.0] } };
    let e = init_system(&cfg, 0).unwrap();
    let mut xs: Vec<f64> = e.alive_positions(Species::Plus).iter().map(|p| p[0]).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, x)| ((i as f64 + 1.0) / n - x * x).abs().max((i as f64 / n - x * x).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 0.01, "KS distance {ks}");
}

#[test]
fn peaked_density_is_rejected() {
    let mut cfg = SimConfig::new(1, 10, 0.1);
    let w: f64 = 0.001;
    let amp = 1.0 / (w * (2.0 * PI).sqrt());
    cfg.init_plus = Density { profile: TestFunction::Gaussian { center: vec![0.5], width: w, amp } };
    assert!(init_system(&cfg, 0).is_err());
}

#[test]
fn moves_without_zone_pairs_keep_counts() {
    let plus = vec![vec![0.8], vec![0.9]];
    let minus = vec![vec![0.7], vec![0.95]];
    let mut e = ParticleEnsemble::from_positions(1, &plus, &minus, 1, 0).unwrap();
    let k = AnnihilationKernel::new(1, 0.05).unwrap();
    let before = e.reference(Species::Plus, 0).to_vec();
    let killed = e.step(&k, 1e-5);
    assert_eq!(killed, 0);
    assert_eq!(e.alive_count(), 2);
    assert_ne!(e.reference(Species::Plus, 0), &before[..]);
}

#[test]
fn single_pair_follows_the_exponential_law() {
    let k = AnnihilationKernel::new(1, 0.1).unwrap();
    let r = k.amplitude() / 2.0;
    let dt = 0.02;
    let plus = vec![vec![0.01], vec![0.9]];
    let minus = vec![vec![0.02], vec![0.9]];
    let trials = 100_000u64;
    let mut hits = 0u64;
    for t in 0..trials {
        let mut e = ParticleEnsemble::from_positions(1, &plus, &minus, 5, t).unwrap();
        hits += e.react(&k, dt) as u64;
    }
    let p = 1.0 - (-r * dt).exp();
    let sigma = (p * (1.0 - p) / trials as f64).sqrt();
    let f = hits as f64 / trials as f64;
    assert!((f - p).abs() < 3.0 * sigma, "{f} vs {p}");
}

#[test]
fn one_step_killed_mass_matches_generator() {
    let d = 1;
    let n = 50;
    let k = AnnihilationKernel::new(d, 0.2).unwrap();
    let base = near_interface(d, n, 0.25, 9);
    let dom = DomainPair::new(d).unwrap();
    let (pp, pm) = (base.alive_positions(Species::Plus), base.alive_positions(Species::Minus));
    let mut rate = 0.0;
    for x in &pp {
        for y in &pm {
            rate += k.ell_eval(&dom, x, y).unwrap();
        }
    }
    // about 0.1 expected events per replica
    let dt = 0.1 * n as f64 / rate;
    let expected = dt * rate / (n as f64 * n as f64);
    let mut killed = Vec::new();
    for rep in 0..10_000u64 {
        let mut e =
            ParticleEnsemble::from_positions(d, &pp_ref(&base, Species::Plus), &pp_ref(&base, Species::Minus), 3, rep)
                .unwrap();
        killed.push(e.react(&k, dt) as f64 / n as f64);
    }
    let est = mean_se(&killed);
    assert!((est.value - expected).abs() < 3.0 * est.se, "{:?} vs {expected}", est);
}

fn pp_ref(e: &ParticleEnsemble, s: Species) -> Vec<Vec<f64>> {
    (0..e.n_initial()).map(|i| e.reference(s, i).to_vec()).collect()
}

#[test]
fn observation_identities() {
    let mut cfg = SimConfig::new(1, 300, 0.05);
    cfg.seed = 2;
    let k = cfg.kernel().unwrap();
    let mut e = init_system(&cfg, 0).unwrap();
    for _ in 0..400 {
        e.step(&k, cfg.dt_bound());
    }
    assert!(e.alive_count() < 300);
    let one = ObservablePair::new(TestFunction::constant(1.0), TestFunction::Zero);
    let o = e.observe(&one, &k);
    assert!((o.pair_plus - e.alive_count() as f64 / 300.0).abs() < 1e-15);
    let opp = ObservablePair::new(TestFunction::constant(0.7), TestFunction::constant(-0.7));
    let o = e.observe(&opp, &k);
    assert!(o.pair_product.abs() < 1e-15 && o.qv_rate.abs() < 1e-15);
}

fn brute_products(e: &ParticleEnsemble, obs: &ObservablePair, k: &AnnihilationKernel) -> (f64, f64) {
    let dom = DomainPair::new(e.d()).unwrap();
    let n = e.n_initial() as f64;
    let (mut lin, mut sq) = (0.0, 0.0);
    for x in e.alive_positions(Species::Plus) {
        for y in e.alive_positions(Species::Minus) {
            let l = k.ell_eval(&dom, &x, &y).unwrap();
            let v = obs.plus.value_physical(Species::Plus, &x) + obs.minus.value_physical(Species::Minus, &y);
            lin += l * v;
            sq += l * v * v;
        }
    }
    (lin / (n * n), sq / (n * n))
}

#[test]
fn pair_product_matches_double_loop() {
    let obs = ObservablePair::new(
        TestFunction::Sum { terms: vec![TestFunction::constant(0.3), TestFunction::cos(&[1], 1.0)] },
        TestFunction::Exp { rate: vec![0.5], amp: 0.8 },
    );
    for (d, profile) in [(1, KernelProfile::Indicator), (1, KernelProfile::Ramp { inner: 0.9 })] {
        for seed in 0..5 {
            let e = near_interface(d, 50, 0.3, seed);
            let k = AnnihilationKernel::new(d, 0.2).unwrap().with_profile(profile).unwrap();
            let o = e.observe(&obs, &k);
            let (lin, sq) = brute_products(&e, &obs, &k);
            assert!((o.pair_product - lin).abs() < 1e-12 * lin.abs().max(1.0), "{} vs {lin}", o.pair_product);
            let grad: f64 = Species::BOTH
                .iter()
                .map(|&s| {
                    (0..50).map(|i| obs.of(s).gradient(e.reference(s, i)).iter().map(|g| g * g).sum::<f64>()).sum::<f64>()
                })
                .sum();
            let qv = (grad / 50.0 + sq) / 50.0;
            assert!((o.qv_rate - qv).abs() < 1e-12 * qv.abs().max(1.0));
        }
    }
    let obs2 = ObservablePair::new(TestFunction::cos(&[1, 2], 1.0), TestFunction::cos(&[2, 0], 0.5));
    for seed in 0..5 {
        let e = near_interface(2, 50, 0.4, seed);
        let k = AnnihilationKernel::new(2, 0.3).unwrap();
        let (lin, _) = brute_products(&e, &obs2, &k);
        let o = e.observe(&obs2, &k);
        assert!((o.pair_product - lin).abs() < 1e-12 * lin.abs().max(1.0));
    }
}

#[test]
fn binned_pairs_equal_brute_force() {
    for (d, band, delta) in [(1, 0.05, 0.03), (2, 0.1, 0.08), (3, 0.2, 0.15)] {
        for profile in [KernelProfile::Indicator, KernelProfile::Ramp { inner: 0.5 }] {
            for seed in 0..4 {
                let e = near_interface(d, 300, band, 100 + seed);
                let k = AnnihilationKernel::new(d, delta).unwrap().with_profile(profile).unwrap();
                let fast = e.pair_set(&k, false);
                let slow = e.pair_set(&k, true);
                assert!(!slow.is_empty());
                assert_eq!(fast.to_vec(), slow.to_vec(), "d={d} {profile:?}");
                for q in 0..fast.len() {
                    assert!((fast.weight(q) - slow.weight(q)).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn brute_force_mode_and_plain_steps_are_bit_identical() {
    let mut cfg = SimConfig::new(1, 400, 0.05);
    cfg.seed = 21;
    let k = cfg.kernel().unwrap();
    let obs = ObservablePair::new(cos1(1, 1.0), cos1(2, 0.5));
    let plan = RunPlan {
        observables: vec![obs],
        obs_times: vec![0.0, 0.02, 0.05],
        stepwise: vec![StepProbe::PairProduct(0)],
        marks: vec![0.01, 0.05],
        keep_final: true,
        ..Default::default()
    };
    let a = run_replica(&cfg, &k, &plan, 2).unwrap();
    let mut brute = cfg.clone();
    brute.engine.brute_force_pairs = true;
    let b = run_replica(&brute, &k, &plan, 2).unwrap();
    assert!(a.events > 0);
    assert_eq!(a.obs, b.obs);
    assert_eq!(a.marks, b.marks);
    assert_eq!(a.final_state, b.final_state);

    let mut plain = cfg.clone();
    plain.engine.leap = false;
    let c = run_replica(&plain, &k, &plan, 2).unwrap();
    let (dt, steps) = cfg.time_step();
    let mut e = init_system(&cfg, 2).unwrap();
    for _ in 0..steps {
        e.step(&k, dt);
    }
    assert_eq!(c.final_state.as_ref().unwrap(), &e);
}

#[test]
fn leaping_preserves_the_statistics() {
    let mut cfg = SimConfig::new(1, 250, 0.1);
    cfg.seed = 4;
    cfg.replicas = 400;
    let k = cfg.kernel().unwrap();
    let plan = RunPlan {
        observables: vec![ObservablePair::new(TestFunction::constant(1.0), TestFunction::Zero)],
        obs_times: vec![0.1],
        ..Default::default()
    };
    let leap = run_ensemble(&cfg, &k, &plan).unwrap();
    cfg.engine.leap = false;
    cfg.seed = 5;
    let plain = run_ensemble(&cfg, &k, &plan).unwrap();
    let m = |r: &[ReplicaRecord]| mean_se(&observations(r, 0, 0).iter().map(|o| o.pair_plus).collect::<Vec<_>>());
    let (a, b) = (m(&leap), m(&plain));
    assert!(a.agrees(&b, 3.0), "{a:?} {b:?}");
}

#[test]
fn pair_counts_stay_equal() {
    let mut steps_total = 0usize;
    for seed in 0..4 {
        let mut cfg = SimConfig::new(1, 500, 1.0);
        cfg.seed = seed;
        let k = cfg.kernel().unwrap();
        let mut e = init_system(&cfg, seed).unwrap();
        let mut killed = 0;
        for _ in 0..270 {
            killed += e.step(&k, cfg.dt_bound());
            assert_eq!(e.count_alive(Species::Plus), e.count_alive(Species::Minus));
            assert_eq!(e.count_alive(Species::Plus), e.alive_count());
            steps_total += 2 * e.alive_count();
        }
        assert!(killed > 0);
        for s in Species::BOTH {
            assert!(e.alive_positions(s).iter().all(|p| DomainPair::new(1).unwrap().contains(s, p)));
        }
    }
    assert!(steps_total >= 1_000_000);
}

#[test]
fn pure_diffusion_matches_the_neumann_law() {
    let t = 0.03;
    let mut cfg = SimConfig::new(1, 5000, t);
    cfg.replicas = 100;
    cfg.seed = 77;
    cfg.init_plus = Density { profile: TestFunction::Linear { constant: 0.0, coeffs: vec![2.0] } };
    let k = cfg.kernel().unwrap().switched_off();
    let plan = RunPlan { obs_times: vec![t], keep_final: true, ..Default::default() };
    let recs = run_ensemble(&cfg, &k, &plan).unwrap();
    let bins = 64;
    let mut counts = vec![0f64; bins];
    for r in &recs {
        let e = r.final_state.as_ref().unwrap();
        assert_eq!(e.alive_count(), 5000);
        for p in e.alive_positions(Species::Plus) {
            counts[((p[0] * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    // u_0(x) = 2x = 1 - sum_{k odd} 8/(k pi)^2 cos(k pi x)
    let cdf = |x: f64| {
        let mut v = x;
        for k in (1..4000).step_by(2) {
            let w = k as f64 * PI;
            v -= 8.0 / (w * w) * (-w * w * t / 2.0).exp() * (w * x).sin() / w;
        }
        v
    };
    let mut chi2 = 0.0;
    for (b, c) in counts.iter().enumerate() {
        let p = cdf((b + 1) as f64 / bins as f64) - cdf(b as f64 / bins as f64);
        let e = p * total;
        chi2 += (c - e) * (c - e) / e;
    }
    let p_value = gamma_q((bins - 1) as f64 / 2.0, chi2 / 2.0);
    assert!(p_value > 0.001, "chi2 = {chi2}, p = {p_value}");
}

#[test]
fn chi_square_helper_is_sane() {
    assert!((gamma_q(1.0, 2.0) - (-2.0f64).exp()).abs() < 1e-10);
    assert!((gamma_q(31.5, 31.5) - 0.4763).abs() < 2e-3);
}

#[test]
fn martingale_path_basics() {
    let o = Observation { pair_plus: 0.4, pair_minus: 0.1, pair_product: 0.3, qv_rate: 0.2, half_laplacian: -1.0 };
    let times: Vec<f64> = (0..50).map(|k| k as f64 * 1e-15).collect();
    let p = martingale_path(&times, &vec![o; 50], 1000).unwrap();
    assert!(p.m_values.iter().all(|m| m.abs() < 1e-9));
    assert!(p.qv_values.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(p.m_values[0], 0.0);
    let bad = [0.0, 0.1, 0.3];
    assert!(martingale_path(&bad, &[o; 3], 10).is_err());
}

#[test]
fn martingale_mean_and_quadratic_variation() {
    let mut cfg = SimConfig::new(1, 100, 0.1);
    cfg.replicas = 1000;
    cfg.seed = 8;
    let k = cfg.kernel().unwrap();
    let obs = ObservablePair::new(TestFunction::constant(1.0), TestFunction::constant(1.0));
    let obs2 = ObservablePair::new(cos1(1, 1.0), cos1(1, -0.5));
    let plan = RunPlan {
        observables: vec![obs, obs2],
        marks: vec![0.1],
        martingale: vec![0, 1],
        ..Default::default()
    };
    let recs = run_ensemble(&cfg, &k, &plan).unwrap();
    for j in 0..2 {
        let m: Vec<f64> = recs.iter().map(|r| r.martingale[j].m_values[0]).collect();
        let q: Vec<f64> = recs.iter().map(|r| r.martingale[j].qv_values[0]).collect();
        let mean = mean_se(&m);
        assert!(mean.value.abs() < 3.0 * mean.se, "{mean:?}");
        let var = variance_se(&m);
        let qv = mean_se(&q);
        assert!(var.agrees(&qv, 3.0), "{var:?} vs {qv:?}");
    }
}

#[test]
fn fluctuation_field_rules() {
    let same = vec![0.3; 10];
    assert!(fluctuation_field(&same, 100, Centering::EnsembleMean).unwrap().iter().all(|y| *y == 0.0));
    assert!(fluctuation_field(&same, 100, Centering::SolverMean(None)).is_err());

    let mut cfg = SimConfig::new(1, 500, 0.0);
    cfg.replicas = 2000;
    let phi = cos1(1, 1.0);
    let plan = RunPlan {
        observables: vec![ObservablePair::new(phi.clone(), TestFunction::Zero)],
        obs_times: vec![0.0],
        ..Default::default()
    };
    let k = cfg.kernel().unwrap();
    let recs = run_ensemble(&cfg, &k, &plan).unwrap();
    let vals: Vec<f64> = observations(&recs, 0, 0).iter().map(|o| o.pairing()).collect();
    let y = fluctuation_field(&vals, 500, Centering::EnsembleMean).unwrap();
    let v = variance_se(&y);
    // <cos^2, 1> - <cos, 1>^2 = 1/2
    assert!((v.value - 0.5).abs() < 3.0 * v.se, "{v:?}");
}

#[test]
fn pure_diffusion_variance_is_stable_under_doubling() {
    let t = 0.05;
    let phi = TestFunction::Linear { constant: 0.0, coeffs: vec![1.0] };
    let mut vars = Vec::new();
    for n in [500, 1000] {
        let mut cfg = SimConfig::new(1, n, t);
        cfg.replicas = 1500;
        cfg.seed = n as u64;
        cfg.init_plus = Density { profile: TestFunction::Linear { constant: 0.0, coeffs: vec![2.0] } };
        let k = cfg.kernel().unwrap().switched_off();
        let plan = RunPlan {
            observables: vec![ObservablePair::new(phi.clone(), TestFunction::Zero)],
            obs_times: vec![t],
            ..Default::default()
        };
        let recs = run_ensemble(&cfg, &k, &plan).unwrap();
        let vals: Vec<f64> = observations(&recs, 0, 0).iter().map(|o| o.pairing()).collect();
        vars.push(variance_se(&fluctuation_field(&vals, n, Centering::EnsembleMean).unwrap()).value);
    }
    assert!((vars[1] / vars[0] - 1.0).abs() < 0.2, "{vars:?}");
}

#[test]
fn tuple_statistics() {
    let phi = cos1(1, 1.0);
    let psi = TestFunction::Linear { constant: 1.0, coeffs: vec![1.0] };
    let mut cfg = SimConfig::new(1, 40, 0.0);
    cfg.seed = 3;
    let ens: Vec<ParticleEnsemble> = (0..400).map(|r| init_system(&cfg, r).unwrap()).collect();
    let one = ProductTest { plus: vec![phi.clone()], minus: vec![] };
    let est = corr_estimate(&ens, &one, None).unwrap();
    let k = cfg.kernel().unwrap();
    let obs = ObservablePair::new(phi.clone(), TestFunction::Zero);
    let direct: f64 = ens.iter().map(|e| e.observe(&obs, &k).pair_plus).sum::<f64>() / 400.0;
    assert!((est.value - direct).abs() < 1e-14);

    // F_0^(2,0) integrates to <psi,1> <psi,1> = 1.5^2
    let two = ProductTest { plus: vec![psi.clone(), psi.clone()], minus: vec![] };
    let e2 = corr_estimate(&ens, &two, None).unwrap();
    assert!((e2.value - 2.25).abs() < 3.0 * e2.se, "{e2:?}");
    assert!(corr_estimate(&ens[..50], &two, None).is_err());

    let five = ProductTest { plus: vec![psi.clone(); 3], minus: vec![psi.clone(); 2] };
    assert!(five.validate(1).is_err());

    let e = &ens[0];
    let three = ProductTest { plus: vec![psi.clone(), phi.clone()], minus: vec![phi.clone()] };
    let xs = e.alive_positions(Species::Plus);
    let ys = e.alive_positions(Species::Minus);
    let mut brute = 0.0;
    for (i, a) in xs.iter().enumerate() {
        for (j, b) in xs.iter().enumerate() {
            if i == j {
                continue;
            }
            for c in &ys {
                brute += psi.value(a) * phi.value(b) * phi.value_physical(Species::Minus, c);
            }
        }
    }
    brute /= 40.0 * 39.0 * 40.0;
    assert!((e.tuple_statistic(&three) - brute).abs() < 1e-12);
}

#[test]
fn toy_system_correlations_match_enumeration() {
    let mut cfg = SimConfig::new(1, 6, 0.06);
    cfg.seed = 12;
    let k = cfg.kernel().unwrap();
    let (dt, steps) = cfg.time_step();
    let phi = TestFunction::Linear { constant: 0.5, coeffs: vec![1.0] };
    let psi = cos1(1, 1.0);
    let test = ProductTest { plus: vec![phi.clone()], minus: vec![psi.clone()] };
    let (mut est, mut brute) = (Vec::new(), Vec::new());
    let mut thinned = 0;
    for r in 0..1_000_000u64 {
        let mut e = init_system(&cfg, r).unwrap();
        for _ in 0..steps {
            e.step(&k, dt);
        }
        thinned += (e.alive_count() < 6) as usize;
        est.push(e.tuple_statistic(&test));
        let mut s = 0.0;
        for x in e.alive_positions(Species::Plus) {
            for y in e.alive_positions(Species::Minus) {
                s += phi.value(&x) * psi.value_physical(Species::Minus, &y);
            }
        }
        brute.push(s / 36.0);
    }
    let (a, b) = (mean_se(&est), mean_se(&brute));
    assert!(a.agrees(&b, 3.0), "{a:?} vs {b:?}");
    assert!((a.value - b.value).abs() < 1e-12);
    assert!(thinned > 1000);
}

#[test]
fn two_time_statistic_is_a_product() {
    let a = [1.0, 2.0, 3.0];
    let b = [0.5, 0.5, 1.0];
    assert!((corr_two_time(&a, &b).unwrap().value - 1.5).abs() < 1e-15);
    assert!(corr_two_time(&a, &b[..2]).is_err());
}

#[test]
fn residual_vanishes_without_annihilation_and_at_time_zero() {
    let mut cfg = SimConfig::new(1, 250, 0.02);
    cfg.replicas = 20;
    let obs = ObservablePair::new(cos1(1, 1.0), TestFunction::constant(0.5));
    let k = cfg.kernel().unwrap().switched_off();
    let table = ProjectionTable::new(vec![0.0, 0.02], cfg.delta(), 17, |_, _, x| k.of_dist_sq(x * x) * (1.0 + x)).unwrap();
    let plan = RunPlan {
        observables: vec![obs],
        marks: vec![0.0, 0.02],
        stepwise: vec![StepProbe::Projection(std::sync::Arc::new(table)), StepProbe::PairProduct(0)],
        ..Default::default()
    };
    let recs = run_ensemble(&cfg, &k, &plan).unwrap();
    let off = bg_residual(&recs, 250, 0, 1, 1, Centering::EnsembleMean).unwrap();
    assert_eq!(recs[0].marks[1].integrals[1], 0.0);
    assert_eq!(off.value, 0.0);
    let on = cfg.kernel().unwrap();
    let recs = run_ensemble(&cfg, &on, &plan).unwrap();
    let zero = bg_residual(&recs, 250, 0, 1, 0, Centering::EnsembleMean).unwrap();
    assert_eq!(zero.value, 0.0);
}

#[test]
fn snapshots_round_trip_and_resume() {
    let mut cfg = SimConfig::new(2, 200, 0.1);
    cfg.seed = 99;
    let k = cfg.kernel().unwrap();
    let mut e = init_system(&cfg, 1).unwrap();
    for _ in 0..20 {
        e.step(&k, cfg.dt_bound());
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.manl");
    write_snapshot(&e, &path).unwrap();
    let mut back = read_snapshot(&path).unwrap();
    assert_eq!(back, e);
    for _ in 0..20 {
        e.step(&k, cfg.dt_bound());
        back.step(&k, cfg.dt_bound());
    }
    assert_eq!(back, e);
    std::fs::write(&path, b"garbage").unwrap();
    assert!(read_snapshot(&path).is_err());
}
