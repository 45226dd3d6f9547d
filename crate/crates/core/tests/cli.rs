use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rstar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rstar"))
        .args(args)
        .env_remove("RSTAR_THREADS")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path) -> Output {
    rstar(&["synth", "--out", p(out), "--seed", "7", "--train-instances", "24", "--test-instances", "12"])
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(rstar(&[]).status.code(), Some(2));
    assert_eq!(rstar(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(rstar(&["synth", "--out", "x", "--classes", "1"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = rstar(&["train", "--data", p(&dir.path().join("missing")), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn bad_bounds_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path()).status.success());
    let train = dir.path().join("train");
    let out = rstar(&["train", "--data", p(&train), "--out", p(&dir.path().join("o")), "--l", "0.8", "--u", "0.2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(synth(a.path()).status.success());
    assert!(synth(b.path()).status.success());
    for f in ["train/images.bin", "train/annotations.txt", "test/images.bin", "test/annotations.txt", "cues.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    assert!(synth(dir.path()).status.success());
    let run = dir.path().join("run");
    let out = rstar(&[
        "train",
        "--data",
        p(&dir.path().join("train")),
        "--out",
        p(&run),
        "--iters",
        "4",
        "--n",
        "5",
        "--ns",
        "2",
        "--l",
        "0",
        "--u",
        "1",
        "--checkpoint-every",
        "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.ckpt", "model-2.ckpt", "model-4.ckpt", "loss.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);

    let ev = dir.path().join("ev");
    let out = rstar(&[
        "eval",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--data",
        p(&dir.path().join("test")),
        "--out",
        p(&ev),
        "--cue-overlap",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(ev.join("report.txt")).unwrap();
    assert!(report.contains("mean_ap:"));
    assert!(report.contains("cue_selection.fraction:"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);
    for f in ["pr.csv", "scores.csv", "selections.csv", "manifest.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }

    let frames = dir.path().join("frames");
    let out = rstar(&[
        "eval",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--data",
        p(&dir.path().join("test")),
        "--out",
        p(&frames),
        "--frame-level",
        "--interpolated",
    ]);
    assert!(out.status.success());
    let report = fs::read_to_string(frames.join("report.txt")).unwrap();
    assert!(report.contains("units: frames"));
    assert!(report.contains("ap_kind: 11-point"));
}

#[test]
fn gradcheck_passes() {
    let out = rstar(&["gradcheck", "--seeds", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}
