use std::path::Path;
use std::process::{Command, Output};

fn nqm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nqm")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = r#"{"spectrum":"power:d=50","bins":10,"batch_sizes":[1,4,16,64],"target":0.05,"families":["sgd","momentum","ema"]}"#;

#[test]
fn empty_batch_list_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"batch_sizes":[]}"#);
    let out = nqm(&["sweep", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sizes"));
}

#[test]
fn bad_inputs_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(nqm(&["sweep", "--config", "/nonexistent.json"]).status.code(), Some(1));
    assert_eq!(nqm(&["sweep", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(nqm(&["plot", "--out", d]).status.code(), Some(1));
    assert_eq!(nqm(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_is_reproducible_and_replottable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = nqm(&["sweep", "--config", &cfg, "--seed", "7", "--jobs", "2", "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = std::fs::read(a.join("sweep.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("sweep.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("fits.json")).unwrap(), std::fs::read(b.join("fits.json")).unwrap());
    let text = String::from_utf8(csv_a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 4);
    assert!(text.starts_with("family,p,B,steps,lower_bound,b_crit,alpha,beta,gamma,frontier_flag,error"));

    let svg = std::fs::read_to_string(a.join("sweep.svg")).unwrap();
    std::fs::remove_file(a.join("sweep.svg")).unwrap();
    assert_eq!(nqm(&["plot", "--out", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(a.join("sweep.svg")).unwrap(), svg);
    let saved: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 7);
}

#[test]
fn mutation_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"verify":{"n_trajectories":2000,"steps":50,"bound_configs":5,"bound_steps":100}}"#,
    );
    let out = nqm(&["verify", "--mutation", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL sampled:sgd"));
    assert!(stdout.contains("PASS bound:momentum"));
    let rows = std::fs::read_to_string(dir.path().join("verify.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
}

#[test]
fn tune_and_schedule_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"spectrum":"power:d=50","bins":10,"batch_sizes":[1,8,64],"target":0.05,"families":["sgd","momentum:0.5"],"n_pieces":10}"#,
    );
    let d = dir.path().to_str().unwrap();
    let o = nqm(&["tune", "--config", &cfg, "--out", d]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let tune = std::fs::read_to_string(dir.path().join("tune.csv")).unwrap();
    assert_eq!(tune.lines().count(), 1 + 6);
    assert!(dir.path().join("lr.svg").exists());

    let o = nqm(&["schedule", "--config", &cfg, "--out", d]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["schedules.json", "schedule_summary.csv", "schedule_B1.csv", "schedules.svg", "final_alpha.svg"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(dir.path().join("schedule_summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let sched: u64 = cols[1].parse().unwrap();
        let constant: u64 = cols[2].parse().unwrap();
        assert!(sched <= constant, "{line}");
    }
}
