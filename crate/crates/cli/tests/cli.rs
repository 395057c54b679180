use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn manl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_manl")).args(args).env_remove("MANL_THREADS").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_model() -> Value {
    json!({"sim": {"d": 1, "n": 100, "t_end": 0.25, "replicas": 40, "seed": 7}})
}

fn write_config(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.display().to_string()
}

fn hydro_config(out: &Path) -> Value {
    json!({
        "experiment": "hydro",
        "model": small_model(),
        "params": {"n_values": [50, 100], "drift": {"n": 100}},
        "outputs": out,
    })
}

fn run(cfg: &str, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", cfg, "--quiet"];
    args.extend_from_slice(extra);
    manl(&args)
}

#[test]
fn unknown_keys_are_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cases = vec![];
    let mut v = hydro_config(&tmp.path().join("o"));
    v["model"]["sim"]["bogus_rate"] = json!(1.0);
    cases.push((v, "bogus_rate"));
    let mut v = hydro_config(&tmp.path().join("o"));
    v["params"]["wobble"] = json!(3);
    cases.push((v, "wobble"));
    let mut v = hydro_config(&tmp.path().join("o"));
    v["colour"] = json!("blue");
    cases.push((v, "colour"));
    for (i, (v, key)) in cases.into_iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.json"), &v);
        let o = run(&cfg, &[]);
        assert_eq!(code(&o), 1, "{}", stderr(&o));
        assert!(stderr(&o).contains(key), "{key}: {}", stderr(&o));
    }
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn time_step_guard_reports_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &hydro_config(&tmp.path().join("o")));
    let o = run(&cfg, &["--override", "model.sim.dt=0.01"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    // delta = 1/sqrt(100) = 0.1
    assert!(err.contains("delta^2/16 = 0.00062"), "{err}");
}

#[test]
fn malformed_override_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &hydro_config(&tmp.path().join("o")));
    let o = run(&cfg, &["--override", "params"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("key=value"), "{}", stderr(&o));
}

#[test]
fn selftest_subcommand_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("st");
    let o = manl(&["selftest", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let table = fs::read_to_string(out.join("selftest.csv")).unwrap();
    assert!(table.starts_with("criterion,check,value,rule,passed\n"));
    assert!(!table.contains(",false\n"));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["passed"], json!(true));
}

#[test]
fn hydro_run_writes_schema_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ca = write_config(tmp.path(), "a.json", &hydro_config(&a));
    let cb = write_config(tmp.path(), "b.json", &hydro_config(&b));
    for (c, threads) in [(&ca, "1"), (&cb, "3")] {
        let o = run(c, &["--threads", threads]);
        assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    }
    let hydro = fs::read_to_string(a.join("hydro.csv")).unwrap();
    assert!(hydro.starts_with("N,replica,t,phi_id,empirical,solver,abs_err\n"));
    // Two N values, 40 replicas, three observables.
    assert_eq!(hydro.lines().count(), 1 + 2 * 40 * 3);
    for f in ["hydro.csv", "hydro_summary.csv", "drift.csv", "report.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let ma: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_ne!(ma["config_hash"], mb["config_hash"], "outputs differ, so the configs do");
    assert_eq!(ma["seeds"], mb["seeds"]);
    assert_eq!(ma["kappa"]["paper_value"], json!(1.0));
    assert_eq!(ma["kappa"]["used"], json!(0.25));
    assert!(ma["seeds"].as_array().unwrap().len() == 2);
}

#[test]
fn overrides_reach_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let cfg = write_config(tmp.path(), "c.json", &hydro_config(&out));
    let o = run(&cfg, &["--override", "params.n_values=[60]", "--override", "params.drift=null", "--override", "report_format=json"]);
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["params"]["n_values"], json!([60]));
    assert!(out.join("report.json").is_file() && !out.join("drift.csv").exists());
    let summary = fs::read_to_string(out.join("hydro_summary.csv")).unwrap();
    assert!(summary.lines().skip(1).all(|l| l.starts_with("60,")));
}

#[test]
fn threshold_failure_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("m");
    let v = json!({
        "experiment": "minkowski",
        "model": {"sim": {"d": 2, "n": 100, "t_end": 0.25}},
        "params": {"deltas": [0.16, 0.08], "quadrature": {"cells_per_axis": 64, "inner_order": 4}},
        "outputs": out,
    });
    let o = run(&write_config(tmp.path(), "m.json", &v), &[]);
    assert_eq!(code(&o), 2, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("FAIL"));
    assert!(fs::read_to_string(out.join("minkowski.csv")).unwrap().starts_with("delta,ratio,increment\n"));
}

#[test]
fn summarize_empty_directory_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let o = manl(&["summarize", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).is_empty());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn summarize_reports_slope_order_and_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("results");
    let h = write_config(tmp.path(), "h.json", &hydro_config(&root.join("zz_hydro")));
    let m = write_config(
        tmp.path(),
        "m.json",
        &json!({
            "experiment": "minkowski",
            "model": small_model(),
            "params": {"deltas": [0.16, 0.08]},
            "outputs": root.join("aa_minkowski"),
        }),
    );
    for c in [&h, &m] {
        assert!(matches!(code(&run(c, &[])), 0 | 2));
    }
    let first = manl(&["summarize", root.to_str().unwrap()]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let text = stdout(&first);
    let (hi, mi) = (text.find("== hydro").unwrap(), text.find("== minkowski").unwrap());
    assert!(hi < mi, "sections sorted by experiment name");
    assert!(text.contains("log-log slope of abs_err in N"));
    assert!(text.contains("rule"));
    assert_eq!(stdout(&manl(&["summarize", root.to_str().unwrap()])), text);

    fs::remove_file(root.join("zz_hydro").join("hydro_summary.csv")).unwrap();
    let o = manl(&["summarize", root.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let text = stdout(&o);
    assert!(text.contains("missing files") && text.contains("hydro_summary.csv"));
    assert!(text.contains("== minkowski"), "partial report still produced");
}
