use std::path::Path;
use std::process::Command;

use helmholtz_msfem::problems::{read_csv, ProblemSpec, RunConfig};

fn hms(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hms"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::desk_plane_wave();
    cfg.problem = ProblemSpec::plane_wave(8.0);
    cfg.n_h = 4;
    cfg.refine = 4;
    cfg.m_list = vec![0, 1, 2];
    let path = dir.join("small.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = hms(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("plane_wave.csv")).unwrap();
    assert!(text.starts_with("problem,method,k,nH,refine,m,coarse_dim,e_L2,e_H,offline_sec,online_sec,flags"));
    assert_eq!(read_csv(text.as_bytes()).unwrap().len(), 6);
}

#[test]
fn describe_and_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = hms(&["describe", "--config", &cfg]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("mesh check"));

    let o = hms(&["spectrum", "--config", &cfg, "--edge", "5"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("edge,j,lambda"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"problem\": 3}").unwrap();
    assert_eq!(hms(&["describe", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(hms(&["run", "--config", "/nonexistent.json", "--out", "/tmp"]).status.code(), Some(1));

    let cfg = small_config(dir.path());
    assert_eq!(hms(&["spectrum", "--config", &cfg, "--edge", "999"]).status.code(), Some(1));

    let mut c: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    c["m_list"] = serde_json::json!([2, 1]);
    std::fs::write(&bad, c.to_string()).unwrap();
    assert_eq!(hms(&["describe", "--config", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn failed_reference_check_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = hms(&["reference", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}
