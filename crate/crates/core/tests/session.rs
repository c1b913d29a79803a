use std::fs;
use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use knobloop::guardrail::RejectReason;
use knobloop::session::{replay, run_session, Faults, ReplayOutcome, RunOptions, SessionConfig, SessionError};

const BASE: &str = r#"
seed = 5
reward = { kind = "app", metric = "p99_ms", direction = "min" }
[host]
surface = "quadratic8"
"#;

fn parse(text: &str, dir: &Path) -> SessionConfig {
    SessionConfig::parse(text, dir).unwrap()
}

fn with_script(dir: &Path, lines: &[&str]) -> SessionConfig {
    fs::write(dir.join("script.jsonl"), lines.join("\n")).unwrap();
    parse(&format!("{BASE}[model]\nbackend = \"scripted\"\nscript = \"script.jsonl\"\n[model.policy]\n"), dir)
}

#[test]
fn unknown_fields_are_config_errors() {
    let err = SessionConfig::parse(&format!("{BASE}bogus = 1\n"), Path::new(".")).unwrap_err();
    assert!(matches!(err, SessionError::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn sim_host_requires_a_surface() {
    let cfg = parse("reward = { kind = \"app\", metric = \"p99_ms\", direction = \"min\" }\n", Path::new("."));
    match run_session(&cfg, RunOptions::default()) {
        Err(err) => assert_eq!(err.exit_code(), 2),
        Ok(_) => panic!("ran without a surface"),
    }
}

#[test]
fn retrieval_needs_a_memory_dir() {
    let cfg = parse(&format!("{BASE}[memory]\nmode = \"top3\"\n"), Path::new("."));
    assert!(matches!(cfg.validate(), Err(SessionError::Config(_))));
}

#[test]
fn dependency_violation_is_rejected_and_not_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_script(
        dir.path(),
        &[r#"{"role":"instant","reply":{"updates":{"min_perf_pct":70,"max_perf_pct":10},"justification":"inverted","converged":false}}"#],
    );
    let out = run_session(&cfg, RunOptions::default()).unwrap();
    let first = out.audit.iter().find(|a| a.verdict.rejections.iter().any(|r| r.reason == RejectReason::DependencyViolation));
    let first = first.expect("the inverted bounds are rejected");
    assert!(first.verdict.accepted.is_empty());
    assert_eq!(out.exit_code(), 0);
}

#[test]
fn gateway_error_skips_the_window() {
    // one transport failure is retried; two in a row surface
    let dir = tempfile::tempdir().unwrap();
    let reset = r#"{"role":"instant","error":"connection reset"}"#;
    let cfg = with_script(dir.path(), &[reset, reset]);
    let out = run_session(&cfg, RunOptions::default()).unwrap();
    let errored: Vec<_> = out.decisions.iter().flat_map(|d| &d.decisions).filter(|d| d.errored).collect();
    assert_eq!(errored.len(), 1);
    assert!(errored[0].commit.is_none());
    assert!(out.report.error.is_none());
    assert_eq!(out.decisions.len() as u64, out.report.windows);
}

#[test]
fn noop_baseline_never_writes() {
    let cfg = parse(&BASE.replace("seed = 5", "seed = 5\nmode = \"baseline:noop\""), Path::new("."));
    let out = run_session(&cfg, RunOptions::default()).unwrap();
    assert!(out.decisions.iter().all(|d| d.commit_after == out.decisions[0].measured_commit));
    assert_eq!(out.sim_backend.as_ref().map(|b| b.state_bytes()), out.initial_state);
}

#[test]
fn interrupt_restores_and_exits_three() {
    let cfg = parse(&format!("{BASE}[model]\nbackend = \"scripted\"\n[model.policy]\n"), Path::new("."));
    let opts = RunOptions {
        interrupt: Some(Arc::new(AtomicBool::new(false))),
        faults: Faults { interrupt_at: Some(12), ..Faults::default() },
    };
    let out = run_session(&cfg, opts).unwrap();
    assert_eq!(out.exit_code(), 3);
    assert!(out.report.restoration.complete);
    assert_eq!(out.decisions.len(), 12);
    assert_eq!(out.sim_backend.as_ref().map(|b| b.state_bytes()), out.initial_state);
}

#[test]
fn output_dir_holding_a_session_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse(&format!("{BASE}[model]\nbackend = \"scripted\"\n[model.policy]\n"), Path::new("."));
    cfg.output = Some(dir.path().join("run"));
    run_session(&cfg, RunOptions::default()).unwrap();
    for f in ["config.toml", "decisions.jsonl", "measurements.jsonl", "audit.jsonl", "report.json", "trace.csv"] {
        assert!(dir.path().join("run").join(f).exists(), "{f} missing");
    }
    assert!(matches!(run_session(&cfg, RunOptions::default()), Err(SessionError::Setup(_))));
}

#[test]
fn replay_refuses_live_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse(&format!("{BASE}[model]\nbackend = \"scripted\"\n[model.policy]\n"), Path::new("."));
    cfg.output = Some(dir.path().join("run"));
    run_session(&cfg, RunOptions::default()).unwrap();
    assert_eq!(replay(&dir.path().join("run")).unwrap(), ReplayOutcome::Identical);

    let path = dir.path().join("run/config.toml");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replace("backend = \"sim\"", "backend = \"linux\"")).unwrap();
    assert!(matches!(replay(&dir.path().join("run")).unwrap(), ReplayOutcome::Refused(_)));
}

#[test]
fn measurement_log_divergence_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse(&format!("{BASE}[model]\nbackend = \"scripted\"\n[model.policy]\n"), Path::new("."));
    cfg.output = Some(dir.path().join("run"));
    run_session(&cfg, RunOptions::default()).unwrap();
    let path = dir.path().join("run/measurements.jsonl");
    let mut lines: Vec<String> = fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[21].push(' ');
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert_eq!(
        replay(&dir.path().join("run")).unwrap(),
        ReplayOutcome::Diverged { log: "measurements.jsonl".into(), window: 21 }
    );
}

