use std::path::Path;
use std::process::{Command, Output};

use biact_core::SimConfig;

fn biact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biact"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn sim_check_passes_on_the_default_build() {
    let o = biact(&["sim-check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.contains(" PASS ")).count() >= 6, "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn print_config_round_trips_and_trace_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    let o = biact(&["sim-check", "--print-config", "--trace", p(&trace)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let toml_part: String = text.split("invariant ").next().unwrap().to_string();
    assert_eq!(SimConfig::from_toml_str(&toml_part).unwrap(), SimConfig::default());
    let csv = std::fs::read_to_string(&trace).unwrap();
    assert!(csv.starts_with("t,theta_l0"));
    assert_eq!(csv.lines().count(), 5001);
}

#[test]
fn failing_invariants_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let mut c = SimConfig::default();
    c.control.kf = 0.001;
    std::fs::write(&cfg, c.to_toml_string()).unwrap();
    let o = biact(&["--config", p(&cfg), "sim-check"]);
    assert_eq!(code(&o), 3, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn zero_chunk_is_rejected_before_any_file_io() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("model.ckpt");
    let o = biact(&["train", "--data", "/definitely/missing", "--out", p(&out), "--chunk", "0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--chunk"), "{}", stderr(&o));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        &["train", "--bogus-flag"][..],
        &["collect", "--out", "x"],
        &["eval", "--ckpt", "/no/such.ckpt", "--out", "/tmp/never"],
        &["export", "--episode", "/no/such/episode", "--csv", "/tmp/never.csv"],
        &["collect", "--episodes", "1", "--expert", "puppet", "--out", "/tmp/never_dir"],
        &["collect", "--episodes", "1", "--objects", "anvil", "--out", "/tmp/never_dir"],
        &["--config", "/no/such.toml", "sim-check"],
        &["--jobs", "0", "sim-check"],
        &["eval", "--ckpt", "x", "--out", "y", "--mode", "sideways"],
    ] {
        let o = biact(args);
        assert_eq!(code(&o), 1, "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    assert!(!Path::new("/tmp/never_dir").exists());
    assert_eq!(code(&biact(&["--help"])), 0);
}

#[test]
fn collect_train_eval_export_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let again = dir.path().join("again");
    let ckpt = dir.path().join("policy.ckpt");
    let eval = dir.path().join("eval");
    let csv = dir.path().join("ep0.csv");

    let o = biact(&["--seed", "5", "collect", "--episodes", "2", "--expert", "scripted", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("saved 2 episodes"));
    let eps = biact_core::episode::list_episodes(&data).unwrap();
    assert_eq!(eps.len(), 2);
    let objects: Vec<String> = eps
        .iter()
        .map(|e| biact_core::Episode::load(e).unwrap().meta.object_spec.name)
        .collect();
    assert_eq!(objects, ["foam_ball", "softball"]);

    let o = biact(&["--seed", "5", "collect", "--episodes", "1", "--out", p(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(eps[0].join("joints.bin")).unwrap(),
        std::fs::read(again.join("episode_0000/joints.bin")).unwrap()
    );
    let o = biact(&["collect", "--episodes", "1", "--out", p(&data)]);
    assert_eq!(code(&o), 1, "existing episodes must not be overwritten");

    let o = biact(&["--seed", "5", "train", "--data", p(&data), "--steps", "200", "--out", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ckpt.is_file());
    let metrics = std::fs::read_to_string(dir.path().join("policy.ckpt.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 201);

    let o = biact(&["--seed", "5", "eval", "--ckpt", p(&ckpt), "--trials", "3", "--object", "foam_ball", "--out", p(&eval)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["trials"].as_array().unwrap().len(), 3);
    assert!(report["objects"][0]["move"].is_u64());
    assert_eq!(std::fs::read_dir(eval.join("trajectories")).unwrap().count(), 3);

    let o = biact(&["export", "--episode", p(&eps[0]), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("tick,t,f_q0"));
    assert_eq!(text.lines().count(), biact_core::Episode::load(&eps[0]).unwrap().len() + 1);
}

#[test]
fn config_file_is_overlaid_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    let mut c = SimConfig::default();
    c.model.chunk_k = 0;
    std::fs::write(&cfg_path, c.to_toml_string()).unwrap();
    // the file alone is invalid
    let o = biact(&["--config", p(&cfg_path), "sim-check"]);
    assert_eq!(code(&o), 1);
    c.model.chunk_k = 7;
    c.model.d_model = 6;
    std::fs::write(&cfg_path, c.to_toml_string()).unwrap();
    let out = dir.path().join("m.ckpt");
    let o = biact(&["--config", p(&cfg_path), "train", "--data", "/missing", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("d_model"), "{}", stderr(&o));
    let o = biact(&["--config", p(&cfg_path), "train", "--data", "/missing", "--out", p(&out), "--d-model", "8"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
}
