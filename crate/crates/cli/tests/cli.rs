use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mactas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mactas"))
        .args(args)
        .env_remove("MACTAS_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "env": {{"kind": "cue_passing", "n_agents": 2, "n_cues": 2}},
  "agent": {{"hidden_dim": 8}},
  "comm": {{"ffn_dim": 8, "heads": 2}},
  "train": {{"batch_size": 4, "buffer_capacity": 16, "test_interval": 40, "test_episodes": 4, "anneal_steps": 100}},
  "seeds": [1, 2],
  "total_env_steps": 120,
  "jobs": 1{extra}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn identical_runs_write_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = mactas(&["train", "--config", path_str(&cfg), "--out", path_str(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("metrics.csv")).unwrap());

    let text = String::from_utf8(csv_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,env_step,mean_test_return,success_rate,loss,epsilon,comm_messages,comm_floats"
    );
    let seeds: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(seeds.into_iter().collect::<Vec<_>>(), vec!["1", "2"]);
    for s in [1, 2] {
        assert!(a.join(format!("seed_{s}/checkpoint/params.bin")).exists());
        assert!(a.join(format!("seed_{s}/checkpoint/manifest.json")).exists());
    }

    // the stored config reproduces the run
    let c = tmp.path().join("c");
    let o = mactas(&["train", "--config", path_str(&a.join("config.json")), "--out", path_str(&c)]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn fresh_communication_does_not_change_initial_returns() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let mut returns = Vec::new();
    for comm in ["none", "mactas"] {
        let out = tmp.path().join(comm);
        let o = mactas(&[
            "train", "--config", path_str(&cfg), "--out", path_str(&out), "--comm", comm, "--total-env-steps", "0",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
        let col: Vec<String> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect();
        assert_eq!(col.len(), 2);
        returns.push(col);
    }
    assert_eq!(returns[0], returns[1]);
}

#[test]
fn invalid_configs_exit_with_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), r#", "totl_env_steps": 5"#);
    let o = mactas(&["train", "--config", path_str(&cfg), "--out", path_str(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("totl_env_steps"));

    let o = mactas(&["train", "--config", path_str(&tiny_config(tmp.path(), "")), "--temperature", "-1", "--explore", "topk"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_and_faults_fail() {
    let o = mactas(&["check"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);

    for fault in ["qmix-no-abs", "comm-nonzero-init"] {
        let o = mactas(&["check", "--fault", fault]);
        assert_eq!(o.status.code(), Some(1), "fault {fault} went unnoticed");
        let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(report["passed"], false);
    }
}

#[test]
fn sweep_runs_cells_and_rejects_empty_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let o = mactas(&["sweep", "--config", path_str(&cfg), "--grid", path_str(&empty), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let grid = tmp.path().join("grid.json");
    std::fs::write(&grid, r#"{"layers": [1, 2]}"#).unwrap();
    let out = tmp.path().join("sweep");
    let o = mactas(&["sweep", "--config", path_str(&cfg), "--grid", path_str(&grid), "--seed", "1", "--out", path_str(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert!(out.join("summary.csv").exists());

    // a one-layer cell is the same run as a plain train
    let plain = tmp.path().join("plain");
    let o = mactas(&["train", "--config", path_str(&cfg), "--seed", "1", "--out", path_str(&plain)]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(plain.join("metrics.csv")).unwrap(),
        std::fs::read(out.join("cell_000/metrics.csv")).unwrap()
    );
}

#[test]
fn eval_and_resume_use_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = tmp.path().join("run");
    let o = mactas(&["train", "--config", path_str(&cfg), "--seed", "2", "--out", path_str(&out)]);
    assert!(o.status.success());

    let o = mactas(&["eval", "--config", path_str(&cfg), "--seed", "2", "--out", path_str(&out), "--episodes", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["episodes"], 3);
    assert!(report["env_steps"].as_u64().unwrap() >= 120);

    let o = mactas(&[
        "train", "--config", path_str(&cfg), "--seed", "2", "--out", path_str(&out), "--resume", "--total-env-steps", "200",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("seed_2/metrics.csv")).unwrap();
    let steps: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(steps.first(), Some(&0));
    assert!(*steps.last().unwrap() >= 200);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));

    let o = mactas(&["eval", "--config", path_str(&cfg), "--seed", "5", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_root_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), r#", "out_dir": "rel/run""#);
    let o = Command::new(env!("CARGO_BIN_EXE_mactas"))
        .args(["train", "--config", path_str(&cfg), "--seed", "1", "--total-env-steps", "0"])
        .env("MACTAS_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("rel/run/metrics.csv").exists());
}
