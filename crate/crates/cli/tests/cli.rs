//! End-to-end tests of the `projrl` binary: exit codes, output
//! schemas, and rerun determinism.

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_projrl"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("projrl-test-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn bad_config_exits_two() {
    let dir = scratch("badcfg");
    let cfg = dir.join("bad.toml");
    fs::write(&cfg, "task = \"submarine\"\n").unwrap();
    let out = bin()
        .args(["run", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = bin()
        .args(["run", "--task", "building", "--controller", "voltvar"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = scratch("unknownkey");
    let cfg = dir.join("typo.toml");
    fs::write(&cfg, "sede = 3\n").unwrap();
    let out = bin()
        .args(["config", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_emits_metrics_with_provenance_and_schema() {
    let dir = scratch("run");
    run_ok(&[
        "run",
        "--task",
        "building",
        "--controller",
        "pcontroller",
        "--steps",
        "12",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(dir.join("metrics_seed0.csv")).unwrap();
    let mut lines = text.lines();
    let prov = lines.next().unwrap();
    assert!(prov.starts_with("# config_hash="));
    assert!(prov.contains("seed=0"));
    assert!(prov.contains("version="));
    let header = lines.next().unwrap();
    assert!(header.starts_with(
        "step,timestamp,cost,curtailment_or_energy,violation_count,infeasible_relaxations,action_0"
    ));
    assert_eq!(lines.count(), 12);
    let summary = fs::read_to_string(dir.join("summary_seed0.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["steps"], 12);
    assert_eq!(v["seed"], 0);
}

#[test]
fn reruns_are_byte_identical() {
    let a = scratch("identical-a");
    let b = scratch("identical-b");
    for dir in [&a, &b] {
        run_ok(&[
            "run",
            "--task",
            "building",
            "--controller",
            "pcontroller",
            "--steps",
            "8",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
    }
    let ma = fs::read(a.join("metrics_seed0.csv")).unwrap();
    let mb = fs::read(b.join("metrics_seed0.csv")).unwrap();
    assert_eq!(ma, mb);
    let sa = fs::read(a.join("summary_seed0.json")).unwrap();
    let sb = fs::read(b.join("summary_seed0.json")).unwrap();
    assert_eq!(sa, sb);
}

#[test]
fn seeds_flag_fans_out() {
    let dir = scratch("seeds");
    run_ok(&[
        "run",
        "--task",
        "building",
        "--controller",
        "pcontroller",
        "--steps",
        "4",
        "--seeds",
        "5,6",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(dir.join("metrics_seed5.csv").exists());
    assert!(dir.join("metrics_seed6.csv").exists());
    let m5 = fs::read_to_string(dir.join("metrics_seed5.csv")).unwrap();
    assert!(m5.lines().next().unwrap().contains("seed=5"));
}

#[test]
fn synth_trace_round_trips_through_run() {
    let dir = scratch("synth");
    run_ok(&[
        "synth",
        "--task",
        "building",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let trace = dir.join("trace_building.csv");
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.starts_with("# config_hash="));
    // default synth trace: 2 days at 5 minutes
    assert_eq!(text.lines().count(), 2 + 2 * 288);
    // the comment line must not break reading the trace back
    let cfg = dir.join("cfg.toml");
    fs::write(
        &cfg,
        format!(
            "task = \"building\"\ncontroller = \"pcontroller\"\nsteps = 6\n[trace]\nsource = {:?}\n",
            trace.to_str().unwrap()
        ),
    )
    .unwrap();
    run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(dir.join("metrics_seed0.csv").exists());
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = scratch("gradcheck");
    run_ok(&[
        "gradcheck",
        "--checks",
        "10",
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    let report = fs::read_to_string(dir.join("gradcheck.txt")).unwrap();
    assert!(report.contains("10/10 passed"));
    assert!(report.contains("network + projection: pass"));
}

#[test]
fn pretrain_checkpoint_feeds_run() {
    let dir = scratch("ckpt");
    run_ok(&["pretrain", "--out-dir", dir.to_str().unwrap()]);
    let ckpt = dir.join("checkpoint_seed0.json");
    assert!(ckpt.exists());
    let cfg = dir.join("cfg.toml");
    fs::write(
        &cfg,
        format!(
            "task = \"building\"\ncontroller = \"noupdate\"\nsteps = 4\n[building]\ncheckpoint = {:?}\n",
            ckpt.to_str().unwrap()
        ),
    )
    .unwrap();
    run_ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(dir.join("metrics_seed0.csv").exists());
}

#[test]
fn sysid_reports_small_error() {
    let dir = scratch("sysid");
    let out = run_ok(&["sysid", "--task", "building", "--out-dir", dir.to_str().unwrap()]);
    let text = fs::read_to_string(dir.join("model_building.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v["holdout_rmse"].as_f64().unwrap() < 0.2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("holdout rmse"));
}
