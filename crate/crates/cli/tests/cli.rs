use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mvmilstein"));
    c.env_remove("MVMILSTEIN_OUTPUT_DIR");
    c
}

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(sub: &str, config: &Path, extra: &[&str]) -> Output {
    bin().arg(sub).arg("--config").arg(config).args(extra).output().unwrap()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

const SIMULATE: &str = r#"{
  "model": {"preset": "double_well.case2"},
  "scheme": {"kind": "taming_milstein", "taming": "MixM", "dt": 0.03125, "T": 0.5, "N": 200},
  "io": {"snapshot_times": [0.0, 0.25, 0.5]},
  "seed": 11
}"#;

#[test]
fn simulate_is_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", SIMULATE);
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();

    assert!(run("simulate", &cfg, &["--out", out_s, "--threads", "1"]).status.success());
    let first = read_dir_sorted(&out);
    assert!(run("simulate", &cfg, &["--out", out_s, "--threads", "4"]).status.success());
    assert_eq!(first, read_dir_sorted(&out));

    let names: Vec<_> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["resolved_config.json", "run.json", "snapshots.csv"]);
}

#[test]
fn resolved_echo_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", SIMULATE);
    let out = tmp.path().join("a");
    assert!(run("simulate", &cfg, &["--out", out.to_str().unwrap(), "--seed", "5"]).status.success());
    let first = read_dir_sorted(&out);

    let echo = tmp.path().join("echo.json");
    fs::copy(out.join("resolved_config.json"), &echo).unwrap();
    fs::remove_dir_all(&out).unwrap();
    // no flags: seed and output directory both come from the echo
    assert!(run("simulate", &echo, &[]).status.success());
    assert_eq!(first, read_dir_sorted(&out));
    let run_json: Value = serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_json["seed"], 5);
}

#[test]
fn seed_flag_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", SIMULATE);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run("simulate", &cfg, &["--out", a.to_str().unwrap(), "--seed", "1"]);
    run("simulate", &cfg, &["--out", b.to_str().unwrap(), "--seed", "2"]);
    assert_ne!(fs::read(a.join("snapshots.csv")).unwrap(), fs::read(b.join("snapshots.csv")).unwrap());
}

#[test]
fn environment_directory_used_without_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "sim.json", SIMULATE);
    let env_dir = tmp.path().join("from_env");
    let o = bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .env("MVMILSTEIN_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("snapshots.csv").exists());
}

#[test]
fn unknown_taming_reports_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"model": {"preset": "double_well.case2"}, "scheme": {"kind": "taming_milstein", "taming": "cosh", "dt": 0.125, "T": 1.0, "N": 4}}"#,
    );
    let o = run("simulate", &cfg, &["--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("scheme.taming"), "{err}");
}

#[test]
fn unknown_key_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.json",
        r#"{"model": {"preset": "double_well.case2"}, "scheme": {"kind": "classical_milstein", "dt": 0.125, "T": 1.0, "N": 4, "steps": 9}}"#,
    );
    let o = run("simulate", &cfg, &["--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("steps"), "{err}");
}

#[test]
fn missing_config_file_is_io_error() {
    let o = run("simulate", Path::new("/nonexistent/run.json"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn failed_check_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "probe.json",
        r#"{"model": {"preset": "double_well.case2"},
            "scheme": {"kind": "taming_milstein", "taming": "TanhM", "dt": 0.0625, "T": 0.5, "N": 50},
            "experiment": {"checks": {"min_blown_fraction": 0.5}}}"#,
    );
    let o = run("probe", &cfg, &["--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let probe: Value = serde_json::from_slice(&fs::read(tmp.path().join("o/probe.json")).unwrap()).unwrap();
    assert_eq!(probe["divergence"]["blown_up"], 0);
}

#[test]
fn converge_writes_records_and_fits() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "conv.json",
        r#"{"model": {"preset": "double_well.case2"},
            "scheme": {"kind": "taming_milstein", "taming": "TanhM", "dt_list": [0.0625, 0.03125, 0.015625], "T": 0.5, "N": 20},
            "experiment": {"schemes": [{"kind": "taming_milstein", "taming": "TanhM"}, {"kind": "classical_milstein"}],
                           "ref_dt": 0.00390625, "seeds": [1, 2]}}"#,
    );
    let out = tmp.path().join("o");
    let o = run("converge", &cfg, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let csv = fs::read_to_string(out.join("convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model,scheme,taming,dt,ref_dt,N,seed,mse,diverged,wallclock_s");
    assert_eq!(lines.count(), 2 * 3 * 2);

    let summary: Value = serde_json::from_slice(&fs::read(out.join("convergence_summary.json")).unwrap()).unwrap();
    let fits = summary["fits"].as_array().unwrap();
    assert_eq!(fits.len(), 2);
    for f in fits {
        let slope = f["fit"]["slope"].as_f64().unwrap();
        assert!(slope > 0.5 && slope < 1.5, "{f}");
    }
    assert!(out.join("study.json").exists());

    // a second run resumes from the partial file and changes nothing
    let before = read_dir_sorted(&out);
    assert!(run("converge", &cfg, &["--out", out.to_str().unwrap(), "--threads", "2"]).status.success());
    assert_eq!(before, read_dir_sorted(&out));
}

#[test]
fn validate_passes_for_every_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "val.json",
        r#"{"model": {"preset": "fitzhugh_nagumo"},
            "scheme": {"kind": "taming_milstein", "taming": "TanhM", "dt": 0.01, "T": 1.0, "N": 10},
            "experiment": {"kinds": ["identity", "tanh", "sine", "tamed"], "samples": 2000}}"#,
    );
    let out = tmp.path().join("o");
    let o = run("validate", &cfg, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&fs::read(out.join("validation.json")).unwrap()).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(v["taming"].as_array().unwrap().len(), 4);
    assert_eq!(v["derivatives"]["passed"], true);
}

#[test]
fn moments_writes_series_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "mom.json",
        r#"{"model": {"preset": "double_well.case2"},
            "scheme": {"kind": "taming_milstein", "taming": "TanhM", "dt_list": [0.125, 0.0625], "T": 0.5, "N": 30},
            "experiment": {"p": 4}}"#,
    );
    let out = tmp.path().join("o");
    let o = run("moments", &cfg, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("moments.csv")).unwrap();
    assert!(csv.starts_with("dt,time,moment,excluded\n"));
    assert_eq!(csv.lines().count(), 1 + 5 + 9);
}

#[test]
fn simulate_rejects_step_grid_only() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "grid.json",
        r#"{"model": {"preset": "double_well.case2"},
            "scheme": {"kind": "classical_milstein", "dt_list": [0.125, 0.0625], "T": 0.5, "N": 3}}"#,
    );
    let o = run("simulate", &cfg, &["--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("scheme.dt"), "{err}");
}
