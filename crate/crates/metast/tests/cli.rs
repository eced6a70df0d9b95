//! End-to-end tests of the installed binary via std::process.

use std::process::{Command, Output};

fn metast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metast"))
        .args(args)
        .output()
        .expect("spawn metast")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small-but-real training flags so each invocation stays under a second.
fn tiny_flags<'a>(out_dir: &'a str) -> Vec<&'a str> {
    vec![
        "run",
        "--data",
        "synth:tiny",
        "--k",
        "4",
        "--outer-rounds",
        "1",
        "--teacher-finetune-steps",
        "4",
        "--inner-steps",
        "4",
        "--batch-labeled",
        "4",
        "--batch-unlabeled",
        "8",
        "--s-val-batches",
        "2",
        "--refresh-period",
        "2",
        "--d-emb",
        "4",
        "--d-hidden",
        "6",
        "--out",
        out_dir,
    ]
}

#[test]
fn help_lists_subcommands() {
    let out = metast(&["--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for cmd in ["run", "sweep", "gradcheck", "oracle"] {
        assert!(text.contains(cmd), "help should list {cmd}: {text}");
    }
}

#[test]
fn gradcheck_command_passes() {
    let out = metast(&["gradcheck", "--instances", "5", "--seed", "3"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn oracle_command_passes() {
    let out = metast(&["oracle", "--pairs", "50", "--seed", "1"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("PASS"));
}

#[test]
fn run_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let d = d.to_str().unwrap();
        let out = metast(&tiny_flags(d));
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        assert!(stdout(&out).contains("final f1 mean"));
    }
    for name in ["seed0.json", "aggregate.csv", "stats.txt"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, "# comment\nlr=0.2\ninner_steps=4\nouter_rounds=1\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = metast(&[
        "run",
        "--data",
        "synth:tiny",
        "--config",
        cfg_path.to_str().unwrap(),
        "--lr",
        "0.05",
        "--k",
        "4",
        "--teacher-finetune-steps",
        "4",
        "--batch-labeled",
        "4",
        "--batch-unlabeled",
        "8",
        "--s-val-batches",
        "2",
        "--d-emb",
        "4",
        "--d-hidden",
        "6",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("seed0.json")).unwrap()).unwrap();
    // flag beats file; untouched file key survives
    assert_eq!(record["config"]["lr"].as_f64().unwrap(), 0.05);
    assert_eq!(record["config"]["inner_steps"].as_u64().unwrap(), 4);
}

#[test]
fn invalid_config_file_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "lr=-1\n").unwrap();
    let out = metast(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error"));
}

#[test]
fn unknown_data_source_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = metast(&[
        "run",
        "--data",
        "synth:galactic",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("error"));
}

#[test]
fn missing_conll_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = metast(&[
        "run",
        "--data",
        "conll:/no/such/dir",
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn malformed_flag_value_is_a_usage_error() {
    let out = metast(&["run", "--lr", "fast"]);
    assert!(!out.status.success());
}

#[test]
fn sweep_reports_every_axis_value() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = metast(&[
        "sweep",
        "--axis",
        "k",
        "--seeds",
        "0",
        "--data",
        "synth:tiny",
        "--outer-rounds",
        "1",
        "--teacher-finetune-steps",
        "4",
        "--inner-steps",
        "4",
        "--batch-labeled",
        "4",
        "--batch-unlabeled",
        "8",
        "--s-val-batches",
        "2",
        "--d-emb",
        "4",
        "--d-hidden",
        "6",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.matches("k = ").count(), 3, "{text}");
    assert!(out_dir.join("sweep.csv").exists());
    assert!(out_dir.join("sweep_summary.csv").exists());
}
