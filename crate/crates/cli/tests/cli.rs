use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fgse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgse"))
        .args(args)
        .env_remove("FGSE_SEED")
        .output()
        .expect("run fgse")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = fgse(args);
    assert!(
        o.status.success(),
        "fgse {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stats_reports_redundancy() {
    let out = ok(&["stats", "--case", "ieee30", "ieee118"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "system,nodes,edges,avg_degree,avg_path_length,avg_clustering,redundancy");
    assert!(lines[1].starts_with("ieee30,284,"), "{}", lines[1]);
    assert!(lines[1].ends_with(",3.7333"), "{}", lines[1]);
    assert!(lines[2].ends_with(",4.1525"), "{}", lines[2]);
}

#[test]
fn generate_is_reproducible_and_records_variance() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["generate", "--case", "ieee30", "--count", "10", "--seed", "1", "--variance", "0.5", "--out", path(out)]);
    }
    for file in ["samples.jsonl", "manifest.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let samples = fs::read_to_string(a.join("samples.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), 10);
    for line in samples.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["phasors"].as_array().unwrap().iter().all(|p| p["var_ang"] == 0.5));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["var_ang"], 0.5);
    assert_eq!(manifest["count"], 10);
    assert!(manifest["discards"].is_u64());
}

#[test]
fn seed_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = Command::new(env!("CARGO_BIN_EXE_fgse"))
        .args(["generate", "--case", "two_bus", "--count", "2", "--out", path(&out)])
        .env("FGSE_SEED", "77")
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed_base"], 77);
}

#[test]
fn exit_codes() {
    assert_eq!(fgse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(fgse(&["generate", "--case", "ieee30"]).status.code(), Some(1));
    assert_eq!(fgse(&["--help"]).status.code(), Some(0));
    assert_eq!(fgse(&["stats", "--case", "/no/such/case.json"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["generate", "--case", "two_bus", "--count", "2", "--out", path(&out)]);
    // never overwrite an existing dataset
    let again = fgse(&["generate", "--case", "two_bus", "--count", "2", "--out", path(&out)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("error"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    ok(&["generate", "--case", "ieee14", "--count", "12", "--seed", "3", "--out", path(&d("train"))]);
    ok(&["generate", "--case", "ieee14", "--count", "6", "--seed", "3", "--split", "val", "--out", path(&d("val"))]);
    ok(&["generate", "--case", "ieee14", "--count", "6", "--seed", "3", "--split", "test", "--out", path(&d("test"))]);
    let small = ["--embedding-size", "8", "--layers", "1", "--epochs", "3", "--seed", "5"];
    let (train_dir, val_dir) = (d("train"), d("val"));
    let run = d("run");
    let mut args = vec!["train", "--data", path(&train_dir), "--val", path(&val_dir), "--out", path(&run)];
    args.extend(small);
    ok(&args);
    for f in ["best.ckpt", "last.ckpt", "train_log.csv", "run.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_loss"));
    assert!((2..=4).contains(&log.lines().count()));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["datasets"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["train"]["seed"], 5);

    // a second run into the same directory is refused
    assert_eq!(fgse(&args).status.code(), Some(2));
    // same seed, same log
    let run2 = d("run2");
    let mut args2 = vec!["train", "--data", path(&train_dir), "--val", path(&val_dir), "--out", path(&run2)];
    args2.extend(small);
    ok(&args2);
    assert_eq!(log, fs::read_to_string(run2.join("train_log.csv")).unwrap());

    let ckpt = run.join("best.ckpt");
    let out = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&d("test"))]);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("mse=") && out.contains(" baseline_mse="), "{out}");

    // checkpoint and dataset from different systems
    ok(&["generate", "--case", "ieee30", "--count", "2", "--split", "test", "--out", path(&d("other"))]);
    let o = fgse(&["eval", "--checkpoint", path(&ckpt), "--data", path(&d("other"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different systems"));
}

#[test]
fn train_rejects_overlapping_splits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["generate", "--case", "two_bus", "--count", "4", "--out", path(&data)]);
    let o = fgse(&[
        "train", "--data", path(&data), "--val", path(&data), "--epochs", "1",
        "--out", path(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn bench_emits_one_row_per_case() {
    let out = ok(&[
        "--jobs", "1", "bench", "--case", "two_bus", "ieee14", "--count", "3", "--embedding-size", "8", "--layers", "1",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "n,wls_time,gnn_time,ratio");
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("14,"));
}
