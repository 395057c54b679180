//! Full acceptance suite: every experiment at desk scale on one shared campaign, the
//! `d = 2` Minkowski run, and a bit-for-bit rerun of reduced configurations.
//!
//! `cargo test --release -p manl --test acceptance`. Results land in `MANL_ACCEPTANCE_OUT`
//! (default: a directory under the cargo target dir).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};

use manl::analyses::{execute, Check};
use manl::config::{apply_override, default_model, ExperimentConfig, ExperimentKind, Params};
use manl::run::{now, persist, run_experiment};

fn reduced(kind: ExperimentKind, out: &Path) -> Result<ExperimentConfig> {
    let mut v = ExperimentConfig::default_for(kind).to_value();
    let mut ov: Vec<String> = vec!["model.sim.n=100".into(), "model.sim.replicas=40".into()];
    let extra: &[&str] = match kind {
        ExperimentKind::Selftest => &["params.n=50", "params.particle_steps=20000"],
        ExperimentKind::Minkowski => &["params.deltas=[0.16,0.08]"],
        ExperimentKind::Hydro => &["params.n_values=[50,100]", "params.drift.n=100"],
        ExperimentKind::Clt => &[
            "params.n=100",
            "params.lambda_off_n=50",
            r#"params.martingale={"n":50,"replicas":40,"t":0.1}"#,
            "params.solver_kmax=16",
        ],
        ExperimentKind::Chaos => &["params.n_values=[50,100]"],
        ExperimentKind::Expansion => &["params.n=100", "params.replicas=100", "params.toy.replicas=3"],
        ExperimentKind::Tightness => &["params.n=100"],
        ExperimentKind::Bg => &["params.n_values=[50,100]"],
    };
    ov.extend(extra.iter().map(|s| s.to_string()));
    ov.push(format!("outputs={}", serde_json::to_string(&out.display().to_string())?));
    for o in &ov {
        apply_override(&mut v, o)?;
    }
    ExperimentConfig::from_value(v)
}

/// Reruns every reduced configuration and compares the CSV bytes.
fn determinism(root: &Path, progress: &mut dyn FnMut(&str)) -> Result<Vec<Check>> {
    let mut checks = vec![];
    for kind in ExperimentKind::ALL {
        let dirs = [root.join("a").join(kind.name()), root.join("b").join(kind.name())];
        let mut tables = vec![];
        for d in &dirs {
            let _ = fs::remove_dir_all(d);
            let res = run_experiment(&reduced(kind, d)?, progress)?;
            tables = res.outcome.tables.iter().map(|t| t.name.clone()).collect();
        }
        let mut differing = vec![];
        for name in &tables {
            let a = fs::read(dirs[0].join(name)).with_context(|| format!("{name} missing"))?;
            let b = fs::read(dirs[1].join(name)).with_context(|| format!("{name} missing"))?;
            if a != b {
                differing.push(name.clone());
            }
        }
        checks.push(Check::holds(
            14,
            format!("{}: {} CSV files identical across reruns{}", kind.name(), tables.len(), if differing.is_empty() {
                String::new()
            } else {
                format!(" except {}", differing.join(", "))
            }),
            differing.len() as f64,
            "== 0 differing files",
            differing.is_empty() && !tables.is_empty(),
        ));
    }
    Ok(checks)
}

fn suite(root: &Path) -> Result<Vec<Check>> {
    let start = Instant::now();
    let mut progress = |m: &str| eprintln!("[{:>8.1}s] {m}", start.elapsed().as_secs_f64());
    let mut checks = vec![];

    let model = default_model();
    let params: Vec<Params> = ExperimentKind::ALL.iter().map(|&k| Params::default_for(k)).collect();
    let started = now();
    let (outcomes, campaign) = execute(&model, &params, &mut progress)?;
    for (p, o) in params.iter().zip(&outcomes) {
        let mut cfg = ExperimentConfig::default_for(p.kind());
        cfg.params = p.clone();
        cfg.outputs = root.join("full").join(p.kind().name());
        persist(&cfg, o, campaign.seeds(), started.clone())?;
        checks.extend(o.checks.iter().cloned());
    }

    let mut d2 = ExperimentConfig::default_for(ExperimentKind::Minkowski);
    let mut sim = manl_core::sim::SimConfig::new(2, model.sim.n, model.sim.t_end);
    (sim.replicas, sim.seed) = (model.sim.replicas, model.sim.seed);
    d2.model.sim = sim;
    d2.outputs = root.join("full").join("minkowski_d2");
    checks.extend(run_experiment(&d2, &mut progress)?.outcome.checks);

    checks.extend(determinism(&root.join("repro"), &mut progress)?);
    Ok(checks)
}

fn main() -> ExitCode {
    if let Err(e) = manl::init_threads(None) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let root = std::env::var_os("MANL_ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let checks = match suite(&root) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };

    let mut by: BTreeMap<u32, Vec<&Check>> = BTreeMap::new();
    for c in &checks {
        by.entry(c.criterion).or_default().push(c);
    }
    let mut lines = vec![];
    for c in &checks {
        lines.push(format!(
            "  [{}] criterion {:>2}: {} (value {:.6e}, rule {})",
            if c.passed { "pass" } else { "FAIL" },
            c.criterion,
            c.label,
            c.value,
            c.rule
        ));
    }
    let mut all = true;
    for k in 1..=14u32 {
        let cs = by.get(&k).map(Vec::as_slice).unwrap_or(&[]);
        let ok = !cs.is_empty() && cs.iter().all(|c| c.passed);
        all &= ok;
        lines.push(format!("criterion {k}: {}", if ok { "PASS" } else { "FAIL" }));
    }
    let text = lines.join("\n") + "\n";
    print!("{text}");
    let _ = fs::write(root.join("acceptance.txt"), &text);
    println!("results in {}", root.display());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
