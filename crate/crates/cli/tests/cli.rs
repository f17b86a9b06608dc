//! Command-line behavior: exit codes, option validation, and the
//! flag > config file > default precedence for training settings.

use std::path::Path;
use std::process::{Command, Output};

fn s2ga(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2ga"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch the s2ga binary")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = s2ga(dir, args);
    assert!(
        out.status.success(),
        "`s2ga {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process was killed by a signal")
}

fn synth_small(dir: &Path, name: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "synth",
        "--classes",
        "8",
        "--per-class",
        "8",
        "--seed",
        "5",
        "--out",
        name,
    ];
    args.extend_from_slice(extra);
    run_ok(dir, &args)
}

fn metric_value(metrics: &str, key: &str) -> String {
    metrics
        .lines()
        .find_map(|line| line.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("metrics file lacks {key}:\n{metrics}"))
        .to_string()
}

#[test]
fn missing_input_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = s2ga(dir.path(), &["train", "--data", "nope.txt", "--out", "m.txt"]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error:"), "stderr was: {stderr}");
}

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = s2ga(dir.path(), &["synth", "--does-not-exist", "1"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn invalid_training_option_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "ds.txt", &[]);
    let out = s2ga(
        dir.path(),
        &[
            "train",
            "--data",
            "ds.txt",
            "--out",
            "m.txt",
            "--val-fraction",
            "1.5",
        ],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("validation fraction"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "ds.txt", &[]);
    std::fs::write(dir.path().join("train.cfg"), "learning-rate=0.01\ntypo_key=3\n").unwrap();
    let out = s2ga(
        dir.path(),
        &[
            "train",
            "--data",
            "ds.txt",
            "--out",
            "m.txt",
            "--config",
            "train.cfg",
        ],
    );
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("typo_key"));
}

#[test]
fn failed_gradient_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // No finite-difference estimate survives a 1e-18 relative tolerance.
    let out = s2ga(dir.path(), &["gradcheck", "--trials", "1", "--tolerance", "1e-18"]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradient check: FAIL"));
}

#[test]
fn model_and_dataset_shapes_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "ds.txt", &[]);
    synth_small(dir.path(), "other.txt", &["--regions", "4"]);
    run_ok(
        dir.path(),
        &[
            "train", "--data", "ds.txt", "--out", "m.txt", "--max-iterations", "5",
        ],
    );
    let out = s2ga(dir.path(), &["eval", "--data", "other.txt", "--model", "m.txt"]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model expects"));
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "ds.txt", &[]);
    std::fs::write(
        dir.path().join("train.cfg"),
        "max-iterations=5\nbatch-size=32\nval-fraction=0\n",
    )
    .unwrap();

    run_ok(
        dir.path(),
        &[
            "train", "--data", "ds.txt", "--out", "m1.txt", "--config", "train.cfg",
            "--metrics", "m1.kv",
        ],
    );
    let kv1 = std::fs::read_to_string(dir.path().join("m1.kv")).unwrap();
    assert_eq!(metric_value(&kv1, "iterations"), "5");

    run_ok(
        dir.path(),
        &[
            "train", "--data", "ds.txt", "--out", "m2.txt", "--config", "train.cfg",
            "--metrics", "m2.kv", "--max-iterations", "9",
        ],
    );
    let kv2 = std::fs::read_to_string(dir.path().join("m2.kv")).unwrap();
    assert_eq!(metric_value(&kv2, "iterations"), "9");
}

#[test]
fn eval_reports_per_class_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "ds.txt", &[]);
    run_ok(
        dir.path(),
        &[
            "train", "--data", "ds.txt", "--out", "m.txt", "--max-iterations", "10",
        ],
    );
    run_ok(
        dir.path(),
        &[
            "eval", "--data", "ds.txt", "--model", "m.txt", "--pool", "all",
            "--metric", "cosine", "--metrics", "e.kv",
        ],
    );
    let kv = std::fs::read_to_string(dir.path().join("e.kv")).unwrap();
    assert_eq!(metric_value(&kv, "pool"), "all");
    assert_eq!(metric_value(&kv, "metric"), "cosine");
    assert_eq!(metric_value(&kv, "total"), "64");
    let classes = kv
        .lines()
        .filter(|l| l.starts_with("class.") && l.contains(".accuracy="))
        .count();
    assert_eq!(classes, 8, "expected one accuracy line per class:\n{kv}");
}

#[test]
fn synth_writes_the_split_it_was_asked_for() {
    let dir = tempfile::tempdir().unwrap();
    let scs_line = synth_small(dir.path(), "scs.txt", &[]);
    let sce_line = synth_small(dir.path(), "sce.txt", &["--split", "sce"]);
    assert!(scs_line.contains("split=scs"), "stdout: {scs_line}");
    assert!(sce_line.contains("split=sce"), "stdout: {sce_line}");
    // Same generator seed, different split policy: only the SPLIT lines
    // (which classes are held out) may differ between the two files.
    let scs = std::fs::read_to_string(dir.path().join("scs.txt")).unwrap();
    let sce = std::fs::read_to_string(dir.path().join("sce.txt")).unwrap();
    let strip = |text: &str| {
        text.lines()
            .filter(|l| !l.starts_with("SPLIT"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_ne!(scs, sce, "the two split policies held out the same classes");
    assert_eq!(strip(&scs), strip(&sce), "split policy changed the data itself");
}

#[test]
fn ablate_reports_one_line_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "ds.txt", &[]);
    let stdout = run_ok(
        dir.path(),
        &[
            "ablate", "--data", "ds.txt", "--k-list", "0,2", "--max-iterations", "10",
            "--metrics", "a.kv",
        ],
    );
    assert_eq!(stdout.lines().count(), 2);
    assert!(stdout.lines().next().unwrap().starts_with("k=0 accuracy="));
    let kv = std::fs::read_to_string(dir.path().join("a.kv")).unwrap();
    assert!(kv.contains("k.0.accuracy=") && kv.contains("k.2.accuracy="));
}
