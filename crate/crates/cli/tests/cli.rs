use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pisac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pisac")).args(args).arg("--quiet").output().expect("spawn pisac")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY: &str = "preset = \"tiny\"\ntrain_size = 20\ntest_size = 10\nbatch_size = 10\nepochs = 2\n";

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let a = pisac(&["gen-data", "--out", out, "--count", "10", "--seed", "1"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let first = fs::read_to_string(dir.path().join("scenarios.csv")).unwrap();
    assert_eq!(first.lines().count(), 11);
    assert!(pisac(&["gen-data", "--out", out, "--count", "10", "--seed", "1"]).status.success());
    assert_eq!(fs::read_to_string(dir.path().join("scenarios.csv")).unwrap(), first);
}

#[test]
fn train_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let t = pisac(&["train", "--config", &cfg, "--out", out, "--seed", "3"]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("epoch,mean_loss,mean_sum_rate,spacing_penalty,sinr_penalty"));
    assert_eq!(lines.count(), 2);
    assert!(dir.path().join("model.ckpt").exists());

    let e = pisac(&["eval", "--out", out]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let results = fs::read_to_string(dir.path().join("results.json")).unwrap();
    assert!(results.contains("\"evaluation\""));

    fs::remove_file(dir.path().join("history.csv")).unwrap();
    assert!(pisac(&["report", "--out", out]).status.success());
    assert_eq!(fs::read_to_string(dir.path().join("history.csv")).unwrap(), history);

    let again = tempfile::tempdir().unwrap();
    let out2 = again.path().to_str().unwrap();
    assert!(pisac(&["train", "--config", &cfg, "--out", out2, "--seed", "3"]).status.success());
    assert_eq!(fs::read_to_string(again.path().join("history.csv")).unwrap(), history);
}

#[test]
fn sweeps_write_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let p = pisac(&["sweep-power", "--config", &cfg, "--out", out, "--pmax-list", "0.1,1", "--seed", "0,1"]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep_power.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("0.1,proposed,") && rows[1].starts_with("0.1,fix-ant,"));
    assert!(rows[2].starts_with("1,proposed,") && rows[3].starts_with("1,fix-ant,"));

    let g = pisac(&["sweep-gamma", "--config", &cfg, "--out", out, "--gamma-list", "0.001,0.01"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep_gamma.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("gamma0,mean_sum_rate,mean_ps,sinr_satisfaction"));
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("0.01,"));
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), "epochz = 3\n");
    assert_eq!(pisac(&["train", "--config", &cfg, "--out", out]).status.code(), Some(1));
    let cfg = write_config(dir.path(), "batch_size = 0\n");
    assert_eq!(pisac(&["train", "--config", &cfg, "--out", out]).status.code(), Some(1));
    assert_eq!(pisac(&["train", "--config", "/nonexistent/run.toml", "--out", out]).status.code(), Some(1));
    assert_eq!(pisac(&["train", "--variant", "other", "--out", out]).status.code(), Some(1));
    assert_eq!(pisac(&["eval", "--out", out]).status.code(), Some(1));
}

#[test]
fn numerical_abort_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}noise_comm = 1e-300\n"));
    let r = pisac(&["train", "--config", &cfg, "--out", out]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}
