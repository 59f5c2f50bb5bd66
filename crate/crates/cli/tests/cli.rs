use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eloss_core::entropy::{entropy_kl, EntropyConfig};
use eloss_core::samples::SampleMatrix;

fn eloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eloss")).args(args).env_remove("ELOSS_EPSILON").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn small_config(alpha: f64, coverage: usize, extra_train: &str) -> String {
    format!(
        r#"{{
  "version": "eloss-exp-1",
  "dataset": {{"name": "blobs-mlp", "train_size": 48, "val_size": 24, "test_size": 24}},
  "train": {{"task": "blobs-mlp", "epochs": 2, "batch_size": 16, "alpha": {alpha},
             "eloss_coverage": {coverage}{extra_train}}},
  "noise": [{{"kind": "gaussian-additive", "ratio": 0.3, "sigma": 0.5, "seed": 2}}]
}}"#
    )
}

fn train_one(dir: &Path, config: &Path) -> PathBuf {
    let out = dir.join("runs");
    let o = eloss(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    PathBuf::from(line.split(':').next().unwrap().trim())
}

#[test]
fn entropy_command_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write(tmp.path(), "line.csv", "0\n1\n3\n");
    let o = eloss(&["entropy", csv.to_str().unwrap(), "--k", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let samples = SampleMatrix::new(vec![0.0, 1.0, 3.0], 3, 1).unwrap();
    let expected = entropy_kl(&samples, 1, &EntropyConfig::default()).unwrap();
    assert!(text.contains(&format!("value: {}", expected.value)));
    assert!(text.contains("clamped_count: 0"));

    let o = eloss(&["entropy", csv.to_str().unwrap(), "--json"]);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["value"].as_f64().unwrap(), expected.value);
    assert_eq!(v["n"], 3);
}

#[test]
fn entropy_usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write(tmp.path(), "line.csv", "0\n1\n3\n");
    let bad = write(tmp.path(), "bad.csv", "0,1\nx,2\n");
    assert_eq!(eloss(&["entropy", csv.to_str().unwrap(), "--k", "0"]).status.code(), Some(2));
    assert_eq!(eloss(&["entropy", csv.to_str().unwrap(), "--k", "3"]).status.code(), Some(2));
    assert_eq!(eloss(&["entropy", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(eloss(&["entropy", "/nonexistent.csv"]).status.code(), Some(2));
    assert_eq!(eloss(&["entropy"]).status.code(), Some(2));
}

#[test]
fn epsilon_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = write(tmp.path(), "dup.csv", "1,1\n1,1\n");
    let run = |eps: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_eloss"));
        c.args(["entropy", csv.to_str().unwrap(), "--json"]);
        match eps {
            Some(e) => c.env("ELOSS_EPSILON", e),
            None => c.env_remove("ELOSS_EPSILON"),
        };
        c.output().unwrap()
    };
    let a: serde_json::Value = serde_json::from_slice(&run(None).stdout).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&run(Some("1e-6")).stdout).unwrap();
    assert_eq!(a["clamped_count"], 2);
    // Two clamped distances in d=2: H moves by d·log(1e-6/1e-12).
    let shift = b["value"].as_f64().unwrap() - a["value"].as_f64().unwrap();
    assert!((shift - 2.0 * 1e6f64.ln()).abs() < 1e-9);
    assert_eq!(run(Some("abc")).status.code(), Some(2));
}

#[test]
fn training_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", &small_config(0.01, 3, ""));
    let dir = train_one(tmp.path(), &cfg);
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    let files = ["runlog.jsonl", "curve.csv", "ckpt.json", "config.json"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    assert!(dir.join("timing.json").exists());
    let again = train_one(tmp.path(), &cfg);
    assert_eq!(again, dir);
    for (f, before) in files.iter().zip(&first) {
        assert_eq!(&fs::read(dir.join(f)).unwrap(), before, "{f} changed");
    }
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cov = write(tmp.path(), "cov.json", &small_config(0.01, 4, ""));
    let unknown = write(tmp.path(), "unk.json", r#"{"version": "eloss-exp-1", "tarin": {}}"#);
    for p in [&cov, &unknown] {
        let o = eloss(&["train", "--config", p.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2));
    }
    let o = eloss(&["train", "--config", "/missing.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = r#", "optimizer": {"kind": "sgd", "lr": 1e6}"#;
    let cfg = write(tmp.path(), "d.json", &small_config(0.0, 0, extra));
    let out = tmp.path().join("runs");
    let o = eloss(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    let log = fs::read_to_string(dir.join("runlog.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"diverged\""));
}

#[test]
fn reports_from_paired_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let base = train_one(tmp.path(), &write(tmp.path(), "a.json", &small_config(0.0, 3, "")));
    let with = train_one(tmp.path(), &write(tmp.path(), "b.json", &small_config(0.01, 3, "")));
    let (b, w) = (base.to_str().unwrap(), with.to_str().unwrap());
    let out = tmp.path().join("report");

    let o = eloss(&["report", b, w, "--mode", "curves", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("run,max,mavp_abs,mavp_literal\n"));
    assert!(text.lines().last().unwrap().starts_with("Delta,"));
    assert!(out.join("curves.svg").exists() && out.join("curves.csv").exists());

    let o = eloss(&["report", b, "--mode", "curves"]);
    assert!(!stdout(&o).contains("Delta"));

    let o = eloss(&["report", w, "--mode", "anomaly"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let clean = text.lines().nth(1).unwrap();
    assert!(clean.starts_with("clean,") && clean.ends_with(",0,0"), "{clean}");

    let o = eloss(&["report", b, w, "--mode", "sweep", "--json"]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);

    let o = eloss(&["report", tmp.path().to_str().unwrap(), "--mode", "curves"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seeds_and_parallel_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.json", &small_config(0.0, 1, ""));
    let out = tmp.path().join("runs");
    let args = |par: &str| {
        eloss(&[
            "train", "--config", cfg.to_str().unwrap(), "--seed", "1", "--seed", "2",
            "--parallel", par, "--out", out.to_str().unwrap(),
        ])
    };
    let serial = args("1");
    assert!(serial.status.success());
    let logs = |o: &Output| -> Vec<Vec<u8>> {
        stdout(o)
            .lines()
            .map(|l| fs::read(Path::new(l.split(':').next().unwrap()).join("runlog.jsonl")).unwrap())
            .collect()
    };
    let a = logs(&serial);
    assert_eq!(a.len(), 2);
    assert_ne!(a[0], a[1]);
    assert_eq!(logs(&args("2")), a);
}
