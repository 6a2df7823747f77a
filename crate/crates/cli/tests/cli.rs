use std::path::Path;
use std::process::{Command, Output};

fn skippy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skippy")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const FIG1: &str = "version = 1\n[instance]\ngenerator = \"fig1\"\n[learner]\nopt1 = \"oracle\"\n";

#[test]
fn run_writes_summary_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FIG1);
    let out = dir.path().join("out");
    let o = skippy(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--repeats", "2", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("seed,instance,v_star,v_pi,episodes,q_updates,terminated_by"));
    assert!(lines.next().unwrap().starts_with("4,fig1,1.0,1.0,"));
    assert!(lines.next().unwrap().starts_with("5,fig1,1.0,1.0,"));
    assert!(out.join("series.csv").is_file());
    assert!(out.join("suboptimality.csv").is_file());
}

#[test]
fn verify_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FIG1);
    let o = skippy(&["verify", "--config", &cfg]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["eta_hat"], 0.0);
    assert_eq!(v["kept_states"], 1);
}

#[test]
fn constants_respects_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), FIG1);
    let o = skippy(&["constants", "--config", &cfg, "--mode", "theory"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l == "mode = theory"), "{text}");
}

#[test]
fn generate_writes_a_readable_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "version = 1\n[instance]\ngenerator = \"padded_linear\"\nd = 2\nhorizon = 3\nchain = 1\n",
    );
    let file = dir.path().join("m.json");
    let o = skippy(&["generate", "--config", &cfg, "--out", file.to_str().unwrap(), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(skippy_core::io::read_mdp_file(&file).is_ok());

    // the generated file can itself be the instance of a run config
    let cfg2 = write_config(
        dir.path(),
        &format!("version = 1\n[instance]\ngenerator = \"file\"\npath = {:?}\n", file.to_str().unwrap()),
    );
    let o = skippy(&["verify", "--config", &cfg2]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!skippy(&["run", "--config", "/no/such/file.toml"]).status.success());
    let cfg = write_config(dir.path(), "version = 1\n[instance]\ngenerator = \"zero_range\"\nhorizon = 2\nextra = 1\n");
    assert!(!skippy(&["verify", "--config", &cfg]).status.success());
    let cfg = write_config(dir.path(), FIG1);
    assert!(!skippy(&["run", "--config", &cfg, "--opt1", "exact"]).status.success());
    assert!(!skippy(&["generate", "--config", &cfg]).status.success());
}
