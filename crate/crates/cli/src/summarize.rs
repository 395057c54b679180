//! Consolidated plain-text report over a results directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::Value;

use manl_core::stats::ols_slope;

use crate::run::{read_manifest, MANIFEST};

pub struct Summary {
    pub text: String,
    pub warnings: Vec<String>,
    pub missing: Vec<PathBuf>,
}

impl Summary {
    pub fn exit_code(&self) -> i32 {
        if self.missing.is_empty() {
            0
        } else {
            1
        }
    }
}

/// Run directories under `root`: itself and its immediate children holding a manifest.
fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![];
    if root.join(MANIFEST).is_file() {
        out.push(root.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("cannot read {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    children.sort();
    out.extend(children);
    Ok(out)
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut s = line(header) + "\n";
    s += &line(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    s.push('\n');
    for r in rows {
        s += &line(r);
        s.push('\n');
    }
    s
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().map(|x| Ok(x?.iter().map(str::to_string).collect())).collect::<Result<_>>()?;
    Ok((header, rows))
}

/// Log-log slope of the hydro error in `N`, per observable.
fn hydro_slopes(header: &[String], rows: &[Vec<String>]) -> BTreeMap<String, (f64, f64, usize)> {
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(n), Some(phi), Some(err)) = (col("N"), col("phi_id"), col("abs_err")) else {
        return BTreeMap::new();
    };
    let mut pts: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let (Ok(nv), Ok(ev)) = (r[n].parse::<f64>(), r[err].parse::<f64>()) else { continue };
        if nv > 0.0 && ev > 0.0 {
            let e = pts.entry(r[phi].clone()).or_default();
            e.0.push(nv.ln());
            e.1.push(ev.ln());
        }
    }
    pts.into_iter()
        .filter(|(_, (x, _))| x.len() >= 2)
        .map(|(k, (x, y))| {
            let (s, _, se) = ols_slope(&x, &y);
            (k, (s, se, x.len()))
        })
        .collect()
}

fn section(root: &Path, dir: &Path, m: &Value, out: &mut String, missing: &mut Vec<PathBuf>) {
    let exp = m["experiment"].as_str().unwrap_or("?");
    let rel = dir.strip_prefix(root).ok().map(|p| p.display().to_string()).filter(|s| !s.is_empty());
    let _ = writeln!(out, "== {exp} ({}) ==", rel.unwrap_or_else(|| ".".into()));
    let _ = writeln!(out, "config hash: {}", m["config_hash"].as_str().unwrap_or("?"));
    if let Some(k) = m.get("kappa") {
        let _ = writeln!(out, "kappa used: {}, closed form: {}, paper value: {}", k["used"], k["closed_form"], k["paper_value"]);
    }
    let mut rows = vec![];
    for c in m["checks"].as_array().into_iter().flatten() {
        rows.push(vec![
            c["criterion"].to_string(),
            if c["passed"].as_bool() == Some(true) { "PASS".into() } else { "FAIL".into() },
            c["value"].to_string(),
            c["rule"].as_str().unwrap_or("").to_string(),
            c["label"].as_str().unwrap_or("").to_string(),
        ]);
    }
    let header: Vec<String> = ["criterion", "result", "value", "rule", "check"].iter().map(|s| s.to_string()).collect();
    out.push('\n');
    out.push_str(&render(&header, &rows));

    for f in m["files"].as_array().into_iter().flatten().filter_map(Value::as_str) {
        if !dir.join(f).is_file() {
            missing.push(dir.join(f));
        }
    }
    for name in m["summary_tables"].as_array().into_iter().flatten().filter_map(Value::as_str) {
        let p = dir.join(name);
        let _ = writeln!(out, "\n{name}");
        match read_csv(&p) {
            Ok((h, r)) => {
                out.push_str(&render(&h, &r));
                if exp == "hydro" {
                    for (phi, (s, se, k)) in hydro_slopes(&h, &r) {
                        let _ = writeln!(out, "phi {phi}: log-log slope of abs_err in N = {s:.3} (se {se:.3}, {k} points)");
                    }
                }
            }
            Err(_) => {
                let _ = writeln!(out, "(missing)");
                if !missing.contains(&p) {
                    missing.push(p);
                }
            }
        }
    }
    out.push('\n');
}

pub fn summarize(root: &Path) -> Result<Summary> {
    let mut found = vec![];
    let mut warnings = vec![];
    for d in run_dirs(root)? {
        match read_manifest(&d) {
            Ok(m) => {
                let exp = m["experiment"].as_str().unwrap_or("").to_string();
                found.push((exp, d, m));
            }
            Err(e) => warnings.push(format!("{e:#}")),
        }
    }
    found.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
    let mut text = String::new();
    let mut missing = vec![];
    if found.is_empty() {
        warnings.push(format!("no manifests found under {}", root.display()));
    }
    let (mut pass, mut fail) = (0, 0);
    for (_, d, m) in &found {
        for c in m["checks"].as_array().into_iter().flatten() {
            if c["passed"].as_bool() == Some(true) {
                pass += 1;
            } else {
                fail += 1;
            }
        }
        section(root, d, m, &mut text, &mut missing);
    }
    if !found.is_empty() {
        let _ = writeln!(text, "checks: {pass} passed, {fail} failed");
    }
    if !missing.is_empty() {
        let _ = writeln!(text, "\nmissing files:");
        for p in &missing {
            let _ = writeln!(text, "  {}", p.display());
        }
    }
    Ok(Summary { text, warnings, missing })
}
