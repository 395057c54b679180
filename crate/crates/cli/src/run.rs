//! Running one configured experiment: outputs, report and manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use manl_core::annihilation::{kappa_limit, PAPER_LIMIT_RATIO};

use crate::analyses::{execute, Check, Outcome};
use crate::campaign::SeedRecord;
use crate::config::{ExperimentConfig, ReportFormat};

pub const MANIFEST: &str = "manifest.json";

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct Kappa {
    used: f64,
    closed_form: f64,
    paper_value: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config_hash: String,
    config: Value,
    seeds: Vec<SeedRecord>,
    code_version: &'static str,
    started: String,
    finished: String,
    kappa: Kappa,
    summary: &'a Value,
    checks: &'a [Check],
    files: Vec<String>,
    summary_tables: &'a [String],
    passed: bool,
}

pub struct RunResult {
    pub outcome: Outcome,
    pub dir: PathBuf,
}

impl RunResult {
    pub fn passed(&self) -> bool {
        self.outcome.passed()
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn report_csv(checks: &[Check]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["criterion", "label", "value", "rule", "passed"])?;
    for c in checks {
        w.write_record([c.criterion.to_string(), c.label.clone(), crate::analyses::num(c.value), c.rule.clone(), c.passed.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Writes an outcome's tables, report and manifest under `cfg.outputs`.
pub fn persist(cfg: &ExperimentConfig, outcome: &Outcome, seeds: Vec<SeedRecord>, started: String) -> Result<()> {
    let dir = &cfg.outputs;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut files = vec![];
    for t in &outcome.tables {
        write_atomic(&dir.join(&t.name), t.to_csv()?.as_bytes())?;
        files.push(t.name.clone());
    }
    let report = match cfg.report_format {
        ReportFormat::Csv => ("report.csv", report_csv(&outcome.checks)?),
        ReportFormat::Json => ("report.json", serde_json::to_string_pretty(&outcome.checks)? + "\n"),
    };
    write_atomic(&dir.join(report.0), report.1.as_bytes())?;
    files.push(report.0.into());

    let manifest = Manifest {
        experiment: cfg.experiment.name(),
        config_hash: cfg.hash(),
        config: cfg.to_value(),
        seeds,
        code_version: env!("CARGO_PKG_VERSION"),
        started,
        finished: now(),
        kappa: Kappa { used: cfg.model.kappa(), closed_form: kappa_limit(cfg.model.sim.d), paper_value: PAPER_LIMIT_RATIO },
        summary: &outcome.summary,
        checks: &outcome.checks,
        files,
        summary_tables: &outcome.summary_tables,
        passed: outcome.passed(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST), text.as_bytes())
}

/// Runs `cfg` and persists everything under `cfg.outputs`.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<RunResult> {
    let started = now();
    fs::create_dir_all(&cfg.outputs).with_context(|| format!("cannot create {}", cfg.outputs.display()))?;
    let (mut outcomes, campaign) = execute(&cfg.model, std::slice::from_ref(&cfg.params), progress)?;
    let outcome = outcomes.pop().expect("one outcome per experiment");
    persist(cfg, &outcome, campaign.seeds(), started)?;
    Ok(RunResult { outcome, dir: cfg.outputs.clone() })
}

/// Reads a manifest back as JSON.
pub fn read_manifest(dir: &Path) -> Result<Value> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", p.display()))
}

