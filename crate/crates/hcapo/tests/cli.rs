use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hcapo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcapo")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn cfg(name: &str) -> String {
    configs().join(name).to_string_lossy().into_owned()
}

#[test]
fn train_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = hcapo(&["train", "--config", &cfg("bottleneck.toml"), "--iterations", "6", "--seed", "11", "--metrics", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (a, b) = (fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 7);
    assert!(text.starts_with("iteration,success_rate,"));
}

#[test]
fn train_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    let p = dir.path().join("p.txt");
    let o = hcapo(&[
        "train", "--config", &cfg("chain.toml"), "--iterations", "3", "--omega", "0", "--smoothing", "on",
        "--norm-scope", "per-step", "--metrics", m.to_str().unwrap(), "--params-out", p.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&m).unwrap().lines().count(), 4);
    let params = hcapo::params::from_text(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(params.layout().state_count(), 6);
}

#[test]
fn sweep_writes_one_series_per_distinct_omega() {
    let dir = tempfile::tempdir().unwrap();
    let o = hcapo(&[
        "sweep", "--config", &cfg("chain.toml"), "--omegas", "0,0.5,0", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("listed more than once"));
    let mut names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["metrics-omega-0.5.csv", "metrics-omega-0.csv"]);
}

#[test]
fn oracle_check_passes_on_shipped_configs() {
    let dir = tempfile::tempdir().unwrap();
    let tables = dir.path().join("q.csv");
    let o = hcapo(&["oracle-check", "--config", &cfg("fork.toml"), "--samples", "3000", "--tables", tables.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("PASS bayes-marginalization"));
    assert!(!out.contains("FAIL"));
    assert!(fs::read_to_string(&tables).unwrap().starts_with("state,action,policy_prob,q,v,visitation"));
}

#[test]
fn credit_rows_cover_every_step() {
    let o = hcapo(&["credit", "--config", &cfg("bottleneck.toml")]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "trajectory_id,step,state,score,ratio,refined_q,smoothed_q,macro_adv,micro_adv,composite,masked"
    );
    assert!(lines.count() >= 8);
}

#[test]
fn bad_config_exits_with_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "group_size = 1\n[env]\nkind = \"chain\"\nlength = 3\n").unwrap();
    let o = hcapo(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("group_size"));
    let o = hcapo(&["train", "--config", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(2));
}
