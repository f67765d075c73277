//! Binary-level checks: exit codes, file round trips, tamper detection.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ehv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ehv-cli-test-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = workdir("usage");
    let out = ehv(&["frobnicate"], &dir);
    assert_eq!(out.status.code(), Some(2));
    let out = ehv(&["simulate", "--no-such-flag"], &dir);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn compile_summarizes_the_fixture() {
    let dir = workdir("compile");
    assert!(ehv(&["fixtures", "--out", "fx"], &dir).status.success());
    let out = ehv(
        &["compile", "fx/vincristine_v2.grammar", "fx/clinical.vocab"],
        &dir,
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("vincristine v2"));
    assert!(text.contains("policy root   sha256:"));
}

#[test]
fn compile_rejects_non_regular_grammar() {
    let dir = workdir("nonregular");
    std::fs::write(dir.join("bad.grammar"), "rule A -> A A\n").unwrap();
    std::fs::write(dir.join("v.vocab"), "size 4\n").unwrap();
    let out = ehv(&["compile", "bad.grammar", "v.vocab"], &dir);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("non-regular"), "stderr: {err}");
}

#[test]
fn explore_small_scope_exits_zero() {
    let dir = workdir("explore");
    let out = ehv(&["explore", "--versions", "5", "--actions", "3"], &dir);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("violations            0"));
    assert!(text.contains("deadlocks             0"));
}

#[test]
fn simulate_writes_artifacts_and_verify_accepts_them() {
    let dir = workdir("simulate");
    assert!(ehv(&["fixtures", "--out", "fx"], &dir).status.success());
    let out = ehv(&["simulate", "fx/w4_update.scenario", "--out", "run"], &dir);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in [
        "events.log",
        "metrics.json",
        "node0.gbom",
        "node0.oscal.json",
    ] {
        assert!(dir.join("run").join(name).exists(), "{name} missing");
    }
    let verify = ehv(&["gbom", "verify", "run/node0.gbom"], &dir);
    assert_eq!(verify.status.code(), Some(0));
    let verify = ehv(&["gbom", "verify", "run/node0.oscal.json"], &dir);
    assert_eq!(verify.status.code(), Some(0));
}

#[test]
fn tampered_log_fails_verification_with_the_index() {
    let dir = workdir("tamper");
    assert!(ehv(&["fixtures", "--out", "fx"], &dir).status.success());
    assert!(ehv(
        &["simulate", "fx/w1_baseline.scenario", "--out", "run"],
        &dir
    )
    .status
    .success());
    let log_path = dir.join("run/node1.gbom");
    let text = std::fs::read_to_string(&log_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    assert!(lines.len() > 5);
    lines[3] = lines[3].replace("PERMIT", "DENY");
    assert_ne!(lines[3], text.lines().nth(3).unwrap(), "tamper applied");
    std::fs::write(&log_path, lines.join("\n")).unwrap();
    let out = ehv(&["gbom", "verify", "run/node1.gbom"], &dir);
    assert_eq!(out.status.code(), Some(1));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(
        report.contains("BROKEN at record index 3"),
        "report: {report}"
    );
}

#[test]
fn bench_mask_records_context_and_stays_sane() {
    let dir = workdir("bench");
    let out = ehv(
        &["bench-mask", "--vocab", "4096", "--iterations", "500"],
        &dir,
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("vocabulary          4096"));
    assert!(text.contains("seed"));
    assert!(text.contains("hardware"));
    assert!(text.contains("500/500") || text.contains("5/5"));
}

#[test]
fn checked_in_fixtures_match_the_generator() {
    let dir = workdir("drift");
    assert!(ehv(&["fixtures", "--out", "generated"], &dir)
        .status
        .success());
    let repo_fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    for entry in std::fs::read_dir(dir.join("generated")).unwrap() {
        let generated = entry.unwrap().path();
        let name = generated.file_name().unwrap();
        let committed = repo_fixtures.join(name);
        assert!(
            committed.exists(),
            "{} missing from the repo fixtures",
            name.to_string_lossy()
        );
        assert_eq!(
            std::fs::read_to_string(&generated).unwrap(),
            std::fs::read_to_string(&committed).unwrap(),
            "{} drifted from `ehv fixtures` output",
            name.to_string_lossy()
        );
    }
}

#[test]
fn simulate_builtin_workload_needs_no_file() {
    let dir = workdir("builtin");
    let out = ehv(&["simulate", "--workload", "W3", "--seed", "9"], &dir);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("escalate="));
}
