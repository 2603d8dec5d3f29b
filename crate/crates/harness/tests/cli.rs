use std::path::Path;
use std::process::Command;

use lcm_harness::data::Manifest;
use lcm_harness::metrics::{parse_jsonl, CSV_HEADER};

fn lcm(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lcm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("LCM_NUM_WORKERS")
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn synth(out: &Path, extra: &[&str]) -> Manifest {
    let o = out.display().to_string();
    let mut args = vec![
        "synth",
        "--out",
        &o,
        "--set",
        "data.train_per_class=3",
        "--set",
        "data.val_per_class=1",
        "--set",
        "data.points=128",
    ];
    args.extend_from_slice(extra);
    let (code, _, err) = lcm(&args);
    assert_eq!(code, 0, "{err}");
    Manifest::from_json(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_manifest_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(&dir.path().join("a"), &["--workers", "1"]);
    let b = synth(&dir.path().join("b"), &["--workers", "2"]);
    assert_eq!(a, b);
    assert_eq!(a.classes.len(), 8);
    assert!(a.classes.iter().all(|c| c.train == 3 && c.val == 1));
    let c = synth(&dir.path().join("c"), &["--seed", "1"]);
    assert_ne!(a.sha256, c.sha256);
}

#[test]
fn xyz_dump_writes_one_file_per_cloud() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &["--set", "data.dump_xyz=true"]);
    let n = |s: &str| std::fs::read_dir(dir.path().join("clouds").join(s)).unwrap().count();
    assert_eq!((n("train"), n("val")), (24, 8));
}

#[test]
fn config_file_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nseed = 4\ndata.train_per_clas = 3\n").unwrap();
    let c = cfg.display().to_string();
    let (code, _, err) = lcm(&["synth", "--config", &c, "--out", &dir.path().display().to_string()]);
    assert_eq!(code, 2);
    assert!(err.contains("data.train_per_clas") && err.contains(":3"), "{err}");
    let (code, _, _) = lcm(&["synth", "--set", "data.noise=-1"]);
    assert_eq!(code, 2);
    let (code, _, err) = lcm(&["synth", "--set", "data.patches=8"]);
    assert_eq!(code, 2);
    assert!(err.contains("k_local"), "{err}");
}

#[test]
fn resolved_config_records_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "data.train_per_class = 5\ndata.val_per_class = 1\ndata.points = 128\n").unwrap();
    let c = cfg.display().to_string();
    let o = dir.path().join("out").display().to_string();
    let (code, _, err) = lcm(&["synth", "--config", &c, "--out", &o, "--set", "data.train_per_class=2", "--seed", "9"]);
    assert_eq!(code, 0, "{err}");
    let echo = std::fs::read_to_string(dir.path().join("out/config.resolved.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "data.train_per_class = 2"));
    assert!(echo.lines().any(|l| l == "seed = 9"));
}

#[test]
fn pretrain_writes_documented_metrics_and_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let small = [
        "--set", "data.train_per_class=4", "--set", "data.val_per_class=1", "--set", "data.points=128",
        "--set", "data.patches=16", "--set", "model.k_group=16", "--set", "pretrain.epochs=3",
        "--set", "pretrain.warmup_epochs=1", "--set", "pretrain.batch_size=8",
    ];
    let run = |name: &str, extra: &[&str]| {
        let o = dir.path().join(name).display().to_string();
        let mut args = vec!["pretrain", "--out", &o];
        args.extend_from_slice(&small);
        args.extend_from_slice(extra);
        let (code, _, err) = lcm(&args);
        assert_eq!(code, 0, "{err}");
    };
    run("full", &[]);
    run("part", &["--set", "pretrain.stop_after=1"]);
    let part_ck = dir.path().join("part/checkpoint.bin").display().to_string();
    run("resumed", &["--set", &format!("pretrain.resume={part_ck}")]);

    let full = dir.path().join("full");
    let csv = std::fs::read_to_string(full.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let rows = parse_jsonl(&std::fs::read_to_string(full.join("metrics.jsonl")).unwrap()).unwrap();
    assert_eq!(rows.len(), csv.lines().count() - 1);
    assert_eq!(rows.iter().filter(|r| r.split == "val").count(), 4);

    let a = std::fs::read(full.join("checkpoint.bin")).unwrap();
    let b = std::fs::read(dir.path().join("resumed/checkpoint.bin")).unwrap();
    assert!(a == b, "resumed training differs from the uninterrupted run");
}

#[test]
fn propcheck_reports_every_selected_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().display().to_string();
    let (code, out, _) = lcm(&["propcheck", "--out", &o, "--set", "propcheck.only=oracle.,topk."]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("propcheck.json")).unwrap()).unwrap();
    assert_eq!(v["total"], 6);
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["residual"].is_number()));
    let (code, out, _) = lcm(&["propcheck", "--out", &o, "--set", "propcheck.only=grad.lal", "--set", "propcheck.fault=gradient"]);
    assert_eq!(code, 1);
    assert!(out.contains("FAIL") && out.contains("grad.lal"));
}

#[test]
fn worker_count_does_not_change_training() {
    let dir = tempfile::tempdir().unwrap();
    let ck = |workers: &str| {
        let o = dir.path().join(workers).display().to_string();
        let (code, _, err) = lcm(&[
            "pretrain", "--out", &o, "--workers", workers, "--set", "data.train_per_class=4", "--set",
            "data.val_per_class=1", "--set", "data.points=128", "--set", "data.patches=16", "--set", "model.k_group=16",
            "--set", "pretrain.epochs=2", "--set", "pretrain.warmup_epochs=1", "--set", "pretrain.batch_size=8",
        ]);
        assert_eq!(code, 0, "{err}");
        std::fs::read(dir.path().join(workers).join("checkpoint.bin")).unwrap()
    };
    assert!(ck("1") == ck("3"));
}
