use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/tiny/eran.toml")
}

fn eran(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eran"))
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = eran(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// ingest, build and train; `extra` goes to train only.
fn prepare(dir: &Path, out: &str, extra: &[&str]) {
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    ok(dir, &["-c", cfg, "-o", out, "ingest"]);
    ok(dir, &["-c", cfg, "-o", out, "build"]);
    let mut args = vec!["-c", cfg, "-o", out, "train"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn full_pipeline_on_fixture() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    prepare(dir, "run", &[]);
    let metrics = ok(dir, &["-c", cfg, "-o", "run", "eval"]);
    assert!(metrics.starts_with("metric\tk\tvalue\nprecision\t5\t"));
    let cold = ok(dir, &["-c", cfg, "-o", "run", "coldstart"]);
    assert!(cold.contains("\nmean\t") && cold.contains("\nrandom\t"));
    let rec = ok(dir, &["-c", cfg, "-o", "run", "recommend", "--user", "u3", "-k", "3"]);
    let lines: Vec<&str> = rec.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("We recommend ") && lines[1].contains(" on the attribute attr"));
    ok(dir, &["-c", cfg, "-o", "run", "export-embeddings"]);
    let run = dir.join("run");
    for f in [
        "dataset.json",
        "networks.json",
        "model.ckpt",
        "trace.tsv",
        "timing.tsv",
        "metrics.tsv",
        "metrics.json",
        "coldstart.tsv",
        "recommend_u3.json",
        "embeddings/users.tsv",
        "embeddings/items_attr0.tsv",
        "checkpoints/epoch_0020.ckpt",
        "coldstart/model.ckpt",
        "train.config.toml",
        "eval.config.toml",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let trace = std::fs::read_to_string(run.join("trace.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 21);
    let effective = std::fs::read_to_string(run.join("train.config.toml")).unwrap();
    assert!(effective.contains("seed = 7"));
    assert!(!run.read_dir().unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "tmp")));
    // reusing the cold-start checkpoint reproduces the report
    let reused = ok(
        dir,
        &["-c", cfg, "-o", "run", "coldstart", "--checkpoint", "run/coldstart/model.ckpt"],
    );
    assert_eq!(reused, cold);
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn training_is_byte_reproducible_single_threaded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    let mut reports = Vec::new();
    for out in ["a", "b"] {
        prepare(dir, out, &["--set", "run.threads=1"]);
        ok(dir, &["-c", cfg, "-o", out, "--set", "run.threads=1", "eval"]);
        reports.push((
            std::fs::read(dir.join(out).join("trace.tsv")).unwrap(),
            std::fs::read(dir.join(out).join("metrics.tsv")).unwrap(),
            std::fs::read(dir.join(out).join("model.ckpt")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn seed_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir, "a", &[]);
    prepare(dir, "b", &["--seed", "8"]);
    let a = std::fs::read(dir.join("a/trace.tsv")).unwrap();
    let b = std::fs::read(dir.join("b/trace.tsv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn environment_overrides_file_and_flags_override_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    ok(dir, &["-c", cfg, "-o", "r", "ingest"]);
    ok(dir, &["-c", cfg, "-o", "r", "build"]);
    let run = |extra: &[&str]| {
        let mut args = vec!["-c", cfg, "-o", "r", "train"];
        args.extend_from_slice(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_eran"))
            .current_dir(dir)
            .env("ERAN_TRAIN_EPOCHS", "3")
            .env("ERAN_RUN_CHECKPOINT_EVERY", "0")
            .args(&args)
            .output()
            .unwrap();
        assert!(out.status.success());
        std::fs::read_to_string(dir.join("r/trace.tsv")).unwrap().lines().count() - 1
    };
    assert_eq!(run(&[]), 3);
    assert_eq!(run(&["--set", "train.epochs=2"]), 2);
}

#[test]
fn modes_and_untrained_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    prepare(dir, "l2", &["--mode", "l2", "--set", "train.epochs=2"]);
    let effective = std::fs::read_to_string(dir.join("l2/train.config.toml")).unwrap();
    assert!(effective.contains("mode = \"l2\""));
    prepare(dir, "flip", &["--flip-rank-sign", "--set", "train.epochs=2"]);
    let effective = std::fs::read_to_string(dir.join("flip/train.config.toml")).unwrap();
    assert!(effective.contains("flip_rank_sign = true"));
    prepare(dir, "untrained", &["--set", "train.epochs=0"]);
    ok(dir, &["-c", cfg, "-o", "untrained", "eval"]);
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = fixture();
    let cfg = cfg.to_str().unwrap();
    // configuration
    assert_eq!(code(&eran(dir, &["-c", cfg, "-o", "r", "--set", "train.mode=sideways", "train"])), 2);
    assert_eq!(code(&eran(dir, &["-c", cfg, "-o", "r", "--set", "train.epochs", "train"])), 2);
    assert_eq!(code(&eran(dir, &["-o", "r", "ingest"])), 2);
    // data / io
    assert_eq!(code(&eran(dir, &["-c", "missing.toml", "-o", "r", "ingest"])), 3);
    assert_eq!(code(&eran(dir, &["-c", cfg, "-o", "r", "eval"])), 3);
    prepare(dir, "r", &["--set", "train.epochs=1"]);
    assert_eq!(code(&eran(dir, &["-c", cfg, "-o", "r", "recommend", "--user", "nobody"])), 3);
    // numerical / shape: a checkpoint from a different catalogue
    ok(dir, &["-o", "other", "synth", "--items", "25", "--users", "30"]);
    let other = dir.join("other/eran.toml");
    let other = other.to_str().unwrap();
    ok(dir, &["-c", other, "-o", "o", "ingest"]);
    ok(dir, &["-c", other, "-o", "o", "build"]);
    let mismatch = eran(dir, &["-c", other, "-o", "o", "eval", "--checkpoint", "r/model.ckpt"]);
    assert_eq!(code(&mismatch), 4, "{}", String::from_utf8_lossy(&mismatch.stderr));
}
