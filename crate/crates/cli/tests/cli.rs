//! End-to-end tests of the command-line interface: exit codes, config
//! validation, provenance checks and output determinism.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn derotnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_derotnet"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    derotnet()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn derotnet")
}

/// A deliberately tiny configuration so that training-backed commands finish
/// in seconds.
const TINY_CONFIG: &str = r#"
seed = 7
images = 12

[scene]
width = 64
height = 64
glyph_count = [1, 1]
glyph_size = [20.0, 30.0]
distractor_count = [1, 2]

[network]
input_size = 24
shared_channels = [2, 3, 4]
branch_channels = 4
fc_hidden = [8, 6]

[training]
batch_size = 4
max_batches_per_epoch = 2
augment_step_deg = 180.0
negatives_per_image = 2
rotation_schedule = [{ epochs = 1, lr = 0.001 }]
detection_epochs = 1
joint_epochs = 1

[proposals]
clusters = 2
max_negatives_per_cluster = 50

[proposals.windows]
min_scale = 16.0
max_scale = 32.0

[proposals.svm]
epochs = 20

[mining]
rounds = 1
retrain_epochs = 1
"#;

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY_CONFIG).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_exits_zero() {
    let dir = TempDir::new().unwrap();
    let out = run(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "calibrate", "propose", "train", "mine", "eval", "gradcheck"] {
        assert!(text.contains(sub), "--help does not mention {sub}");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\nturbo_mode = true\n").unwrap();
    let out = run(&["--config", path.to_str().unwrap(), "synth"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("turbo_mode"), "stderr should name the bad key: {err}");
}

#[test]
fn missing_config_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["--config", "/nonexistent/nope.toml", "synth"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_thread_env_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = derotnet()
        .args(["synth"])
        .env("DEROTNET_THREADS", "many")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_before_training_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(
        &["--config", &cfg, "--out", out_dir.to_str().unwrap(), "eval"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_is_deterministic_and_idempotent() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = run(
            &["--config", &cfg, "--out", out_dir.to_str().unwrap(), "synth"],
            dir.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest_a = std::fs::read(a.join("dataset/manifest.jsonl")).unwrap();
    let manifest_b = std::fs::read(b.join("dataset/manifest.jsonl")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    let mut names: Vec<_> = std::fs::read_dir(a.join("dataset/images"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 12);
    for name in names {
        let ia = std::fs::read(a.join("dataset/images").join(&name)).unwrap();
        let ib = std::fs::read(b.join("dataset/images").join(&name)).unwrap();
        assert_eq!(ia, ib, "image {name:?} differs between reruns");
    }
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(
        &["--config", &cfg, "--out", out_dir.to_str().unwrap(), "gradcheck"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(out_dir.join("gradcheck.json")).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert!(doc.as_array().map(|a| !a.is_empty()).unwrap_or(false) || doc.is_object());
}

#[test]
fn pipeline_respects_provenance_and_force() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_str().unwrap().to_owned();

    for cmd in ["synth", "calibrate"] {
        let out = run(&["--config", &cfg, "--out", &out_str, cmd], dir.path());
        assert!(
            out.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(out_dir.join("proposal_model.json").exists());
    assert!(out_dir.join("rotation.ckpt").exists());

    // same config: propose runs
    let out = run(
        &["--config", &cfg, "--out", &out_str, "propose", "--split", "val"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("proposals-val.jsonl").exists());

    // different seed changes the config hash: artifacts are refused
    let out = run(
        &["--config", &cfg, "--seed", "99", "--out", &out_str, "propose", "--split", "val"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--force"), "mismatch message should mention --force: {err}");

    // --force overrides the provenance check
    let out = run(
        &[
            "--config", &cfg, "--seed", "99", "--out", &out_str, "--force", "propose",
            "--split", "val",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // bad split name is a usage error
    let out = run(
        &["--config", &cfg, "--out", &out_str, "propose", "--split", "huh"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_roundtrip_produces_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    let out_str = out_dir.to_str().unwrap().to_owned();

    for args in [
        vec!["synth"],
        vec!["calibrate"],
        vec!["train", "--mode", "joint"],
        vec!["eval", "--mode", "joint"],
    ] {
        let mut full = vec!["--config", cfg.as_str(), "--out", out_str.as_str()];
        full.extend(args.iter());
        let out = run(&full, dir.path());
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(out_dir.join("model-joint.ckpt").exists());
    assert!(out_dir.join("train_log-joint.jsonl").exists());
    let eval_dir = out_dir.join("eval-joint");
    for name in ["metrics.json", "pr_curve.csv", "pr_curve.svg", "detections.jsonl"] {
        assert!(eval_dir.join(name).exists(), "missing {name}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    let ap = metrics["metrics"]["ap"].as_f64().or_else(|| metrics["ap"].as_f64());
    assert!(ap.is_some(), "metrics.json has no ap field: {metrics}");
}
