use std::fs;
use std::path::Path;

use pmp_core::cli::run_command;
use pmp_core::data::load_dataset;

const TINY: &str = r#"{
  "seed": 4,
  "backbone": {"side": 128, "base_channels": 4, "window": 2},
  "small": {"patch_size": 1, "k": 3, "n": 1},
  "large": {"patch_size": 2, "k": 2, "n": 1},
  "train": {"epochs": 2, "folds": 2},
  "data": {"per_class": 3, "test_per_class": 2}
}"#;

fn run(args: &[&str]) -> i32 {
    run_command(std::iter::once("pmp").chain(args.iter().copied()))
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_datasets_with_folds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert_eq!(run(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let (train, plan) = load_dataset(&out.join("data/train")).unwrap();
    assert_eq!(train.class_counts(), vec![3; 4]);
    assert_eq!(plan.unwrap().k, 2);
    let (test, plan) = load_dataset(&out.join("data/test")).unwrap();
    assert_eq!(test.len(), 8);
    assert!(plan.is_none());
}

#[test]
fn train_eval_and_cam_produce_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert_eq!(run(&["train", "--config", &cfg, "--out", out_s]), 0);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 1 + 2 + 2);
    assert!(lines[3].starts_with("mean,") && lines[4].starts_with("std,"));
    for fold in 0..2 {
        let cm = fs::read_to_string(out.join(format!("confusion_fold{fold}.csv"))).unwrap();
        let total: u64 = cm.split([',', '\n']).filter(|c| !c.is_empty()).map(|c| c.parse::<u64>().unwrap()).sum();
        assert_eq!(total, 6);
        assert!(out.join(format!("checkpoints/fold{fold}/manifest.json")).exists());
    }

    assert_eq!(run(&["eval", "--config", &cfg, "--out", out_s, "--fold", "1"]), 0);
    assert_eq!(fs::read_to_string(out.join("eval_fold1.csv")).unwrap().lines().count(), 4);

    assert_eq!(run(&["cam", "--config", &cfg, "--out", out_s, "--count", "3"]), 0);
    let pgms: Vec<_> = fs::read_dir(out.join("cam")).unwrap().collect();
    assert_eq!(pgms.len(), 3);
    let bytes = fs::read(pgms[0].as_ref().unwrap().path()).unwrap();
    assert!(bytes.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(bytes.len(), 11 + 16);
}

#[test]
fn single_fold_run_reports_that_fold() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    assert_eq!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--fold", "1"]), 0);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("1,"));
    assert!(out.join("confusion_fold1.csv").exists());
    assert!(!out.join("confusion_fold0.csv").exists());
    assert_ne!(run(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--fold", "2"]), 0);
}

#[test]
fn bad_input_fails_without_running() {
    let dir = tempfile::tempdir().unwrap();
    assert_ne!(run(&["frobnicate"]), 0);
    assert_ne!(run(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]), 0);
    let unknown = write_config(dir.path(), r#"{"trian": {}}"#);
    assert_ne!(run(&["gen", "--config", &unknown]), 0);
    let oversized = write_config(
        dir.path(),
        r#"{"backbone": {"side": 128, "base_channels": 4, "window": 2}, "large": {"patch_size": 2, "k": 4, "n": 1}}"#,
    );
    let out = dir.path().join("never");
    assert_ne!(run(&["train", "--config", &oversized, "--out", out.to_str().unwrap()]), 0);
    assert!(!out.exists());
}

#[test]
fn gradcheck_subcommand_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "7"]), 0);
}
