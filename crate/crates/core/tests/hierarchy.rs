use manl_core::annihilation::AnnihilationKernel;
use manl_core::geometry::Species;
use manl_core::hierarchy::*;
use manl_core::observable::{ObservablePair, TestFunction};
use manl_core::sim::{corr_estimate, init_system, ProductTest, SimConfig};
use manl_core::solvers::{solve_fn, FieldPair, SolverConfig};
use manl_core::stats::Estimate;

fn ones() -> ObservablePair {
    ObservablePair::new(TestFunction::constant(1.0), TestFunction::constant(1.0))
}

fn cos1(k: usize, amp: f64) -> TestFunction {
    TestFunction::cos(&[k], amp)
}

fn solve(delta: f64, kmax: usize, u0: &ObservablePair, off: bool) -> (AnnihilationKernel, SolverConfig, FieldPair, PairFieldTriple, FieldPair) {
    let mut k = AnnihilationKernel::new(1, delta).unwrap();
    if off {
        k = k.switched_off();
    }
    let cfg = SolverConfig { hierarchy_kmax: kmax, ..SolverConfig::default() };
    let f = solve_fn(&k, u0, 0.25, &[0.015625, 0.0625], &cfg).unwrap();
    let (tr, g) = solve_hierarchy(&k, &f, &cfg).unwrap();
    (k, cfg, f, tr, g)
}

fn all_zero(tr: &PairFieldTriple, g: &FieldPair) -> bool {
    let pair = tr.g.iter().chain(&tr.g_plus).chain(&tr.g_minus).flatten();
    let one = g.plus.iter().chain(&g.minus).flatten();
    pair.chain(one).all(|v| *v == 0.0)
}

#[test]
fn no_source_means_no_correlations() {
    let lonely = ObservablePair::new(TestFunction::constant(1.0), TestFunction::Zero);
    let (_, _, _, tr, g) = solve(0.1, 16, &lonely, false);
    assert!(all_zero(&tr, &g));
    let (_, _, _, tr, g) = solve(0.1, 16, &ones(), true);
    assert!(all_zero(&tr, &g));
}

#[test]
fn structure_of_the_solution() {
    let (k, cfg, _, tr, g) = solve(0.1, 40, &ones(), false);
    assert!(tr.g[0].iter().chain(&tr.g_plus[0]).chain(&g.plus[0]).all(|v| *v == 0.0));
    assert_eq!(tr.asymmetry(), 0.0);
    assert!(tr.stats.worst_history.windows(2).all(|w| w[1] < w[0]));
    // Truncation leaves small negative lobes at this mode count.
    // Pair annihilation depletes close opposite pairs and makes like pairs positively correlated.
    for t in [0.015625, 0.0625] {
        let i = tr.index_of(t).unwrap();
        let (lo, hi) = tr.extrema(PairField::Cross, i);
        assert!(hi > 0.0 && lo >= -2e-4 * hi, "G in [{lo}, {hi}]");
        for w in [PairField::Plus, PairField::Minus] {
            let (lo, hi) = tr.extrema(w, i);
            assert!(lo < 0.0 && hi <= 2e-4 * lo.abs(), "{w:?} in [{lo}, {hi}]");
        }
        assert!(g.mass(Species::Plus, i) < 0.0);
        assert!(tr.ell_abs_integral(&k, &cfg, i).unwrap() > tr.abs_integral(PairField::Cross, i));
    }
}

#[test]
fn sign_tightens_with_resolution() {
    let (_, _, _, tr, _) = solve(0.1, 80, &ones(), false);
    let i = tr.index_of(0.0625).unwrap();
    let (lo, hi) = tr.extrema(PairField::Cross, i);
    assert!(lo >= -1e-7 * hi, "G in [{lo}, {hi}]");
}

#[test]
fn growth_exponents() {
    let (k, cfg, _, tr, _) = solve(0.05, 0, &ones(), false);
    let (a, b) = (tr.index_of(0.015625).unwrap(), tr.times.len() - 1);
    let span = (tr.times[b] / tr.times[a]).ln();
    let bulk = (tr.abs_integral(PairField::Cross, b) / tr.abs_integral(PairField::Cross, a)).ln() / span;
    let zone = (tr.ell_abs_integral(&k, &cfg, b).unwrap() / tr.ell_abs_integral(&k, &cfg, a).unwrap()).ln() / span;
    assert!((0.85..=1.15).contains(&bulk), "{bulk}");
    assert!((0.35..=0.65).contains(&zone), "{zone}");
}

#[test]
fn self_convergence_in_the_mode_count() {
    let at = |kmax: usize| {
        let (_, _, _, tr, _) = solve(0.1, kmax, &ones(), false);
        tr.abs_integral(PairField::Cross, tr.index_of(0.0625).unwrap())
    };
    let (a, b, c) = (at(15), at(30), at(60));
    // Second-order Richardson from the two coarse levels; the fine level must land in its band.
    let extrapolated = b + (b - a) / 3.0;
    let band = (b - a).abs();
    assert!((c - extrapolated).abs() <= band, "{a} {b} {c}");
    assert!((c - b).abs() < band);
}

#[test]
fn expansion_terms_at_points() {
    let (_, _, f, tr, g) = solve(0.1, 30, &ones(), false);
    let pts = vec![vec![vec![0.02], vec![0.05]], vec![vec![0.3], vec![0.0]], vec![vec![0.9], vec![0.7]]];
    let zero = expansion_terms(&f, &tr, &g, 1, 1, 0.0, &pts).unwrap();
    assert!(zero.a.iter().all(|a| (a - 1.0).abs() < 1e-9));
    assert!(zero.b.iter().all(|b| *b == 0.0));

    let t = 0.0625;
    let i = tr.index_of(t).unwrap();
    let single: Vec<Vec<Vec<f64>>> = pts.iter().map(|p| vec![p[0].clone()]).collect();
    let one = expansion_terms(&f, &tr, &g, 1, 0, t, &single).unwrap();
    for (p, b) in single.iter().zip(&one.b) {
        assert_eq!(*b, -g.eval(Species::Plus, i, &p[0]));
    }
    let two = expansion_terms(&f, &tr, &g, 1, 1, t, &pts).unwrap();
    for (p, (a, b)) in pts.iter().zip(two.a.iter().zip(&two.b)) {
        let (x, y) = (&p[0], &p[1]);
        let (fp, fm) = (f.eval(Species::Plus, i, x), f.eval(Species::Minus, i, y));
        let direct = -(g.eval(Species::Plus, i, x) * fm + g.eval(Species::Minus, i, y) * fp + tr.eval(PairField::Cross, i, x, y));
        assert!((b - direct).abs() < 1e-12);
        assert!((a - fp * fm).abs() < 1e-15 && *a > 0.0);
    }
    let csv = two.to_csv();
    assert!(csv.starts_with("x0_0,y0_0,A,B\n") && csv.lines().count() == 4);
    let bad = vec![vec![vec![0.1]; 5]];
    assert!(expansion_terms(&f, &tr, &g, 3, 2, t, &bad).is_err());
}

#[test]
fn pairings_agree_with_quadrature_of_the_terms() {
    let (_, _, f, tr, g) = solve(0.1, 30, &ones(), false);
    let t = 0.0625;
    let phi = cos1(1, 1.0);
    let psi = TestFunction::Sum { terms: vec![TestFunction::constant(0.5), cos1(2, 1.0)] };
    let test = ProductTest { plus: vec![phi.clone()], minus: vec![psi.clone()] };
    let p = expansion_pairing(&f, &tr, &g, &test, t).unwrap();
    let (nodes, weights) = manl_core::quadrature::composite_gauss(24, 8, 0.0, 1.0);
    let mut pts = vec![];
    let mut wts = vec![];
    for (x, wx) in nodes.iter().zip(&weights) {
        for (y, wy) in nodes.iter().zip(&weights) {
            pts.push(vec![vec![*x], vec![*y]]);
            wts.push(wx * wy * phi.value(&[*x]) * psi.value(&[*y]));
        }
    }
    let terms = expansion_terms(&f, &tr, &g, 1, 1, t, &pts).unwrap();
    let qa: f64 = terms.a.iter().zip(&wts).map(|(a, w)| a * w).sum();
    let qb: f64 = terms.b.iter().zip(&wts).map(|(b, w)| b * w).sum();
    assert!((qa - p.a).abs() < 1e-9, "{qa} vs {}", p.a);
    assert!((qb - p.b).abs() < 1e-9, "{qb} vs {}", p.b);
    // A symmetric (2, 0) pairing only sees G+ and g+.
    let same = ProductTest { plus: vec![phi.clone(), phi.clone()], minus: vec![] };
    let q = expansion_pairing(&f, &tr, &g, &same, t).unwrap();
    let i = tr.index_of(t).unwrap();
    let gal = manl_core::solvers::Galerkin::new(1, tr.basis.kmax);
    let c = gal.project(&phi);
    let fgal = manl_core::solvers::Galerkin::new(1, f.basis.kmax);
    let fp = f.pairing(Species::Plus, i, &fgal.project(&phi));
    let want = -(2.0 * g.pairing(Species::Plus, i, &c) * fp + tr.pairing(PairField::Plus, i, &c, &c));
    assert!((q.b - want).abs() < 1e-14);
}

#[test]
fn comparison_contract() {
    let mc = [McCorrelation { t: 0.1, n: 100, estimate: Estimate::new(0.5, 0.01) }];
    let terms = [ExpansionPairing { t: 0.1, a: 0.49, b: 0.7 }];
    let rows = compare_expansion(&mc, &terms, 100).unwrap();
    assert!((rows[0].err_a - 0.01).abs() < 1e-12 && (rows[0].err_b - 0.3).abs() < 1e-9);
    assert!((rows[0].se_b - 1.0).abs() < 1e-12 && rows[0].b_within(3.0));
    assert!(compare_expansion(&mc, &terms, 200).is_err());
    let late = [ExpansionPairing { t: 0.2, ..terms[0] }];
    assert!(compare_expansion(&mc, &late, 100).is_err());
    assert!(compare_expansion(&mc, &[], 100).is_err());
}

#[test]
fn independent_particles_have_product_correlations() {
    // Kernel off: F = A exactly, so err_A is pure sampling error.
    let (_, _, f, tr, g) = solve(0.1, 16, &ones(), true);
    let t = 0.0625;
    let mut cfg = SimConfig::new(1, 60, t);
    cfg.seed = 8;
    let kernel = cfg.kernel().unwrap().switched_off();
    let bump = TestFunction::Sum { terms: vec![TestFunction::constant(1.0), cos1(1, 1.0)] };
    let test = ProductTest { plus: vec![cos1(0, 1.0), bump], minus: vec![TestFunction::Sum { terms: vec![TestFunction::constant(1.0), cos1(1, 0.5)] }] };
    for time in [0.0, t] {
        let ens: Vec<_> = (0..2000)
            .map(|r| {
                let mut e = init_system(&cfg, r).unwrap();
                let (dt, steps) = cfg.time_step();
                if time > 0.0 {
                    for _ in 0..steps {
                        e.step(&kernel, dt);
                    }
                }
                e
            })
            .collect();
        let est = corr_estimate(&ens, &test, None).unwrap();
        let terms = expansion_pairing(&f, &tr, &g, &test, time).unwrap();
        let row = compare_expansion(&[McCorrelation { t: time, n: 60, estimate: est }], &[terms], 60).unwrap()[0];
        assert!(row.err_a <= 3.0 * row.se_a, "t = {time}: {row:?}");
        assert_eq!(terms.b, 0.0);
    }
}
