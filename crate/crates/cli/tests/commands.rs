use std::process::Command;

use qkdsim_cli::{cmd_batch, cmd_run, cmd_security_check, RunArgs, SecurityReport};
use qkdsim_core::scenario::{canned, serialize};
use qkdsim_core::simcore::Trace;

fn qkdsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qkdsim"))
}

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("fig3.scn");
    std::fs::write(&scn, serialize(&canned("fig3").unwrap())).unwrap();
    let args = RunArgs {
        scenario: scn,
        seed: Some(5),
        until_s: Some(40),
        trace: Some(dir.path().join("t.jsonl")),
        summary: Some(dir.path().join("s.json")),
    };
    let s = cmd_run(&args).unwrap();
    assert_eq!(s.seed, 5);
    let trace = Trace::from_jsonl(&std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap()).unwrap();
    assert_eq!(trace.of_kind("data_up").count(), 1);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(json["seed"], 5);
}

#[test]
fn batch_by_canned_name() {
    let b = cmd_batch("fig3".as_ref(), 3, Some(30)).unwrap();
    assert_eq!(b.seeds, vec![0, 1, 2]);
    assert!(cmd_batch("fig3".as_ref(), 0, None).is_err());
}

#[test]
fn security_check_with_and_without_adversary() {
    let dir = tempfile::tempdir().unwrap();
    let adv = dir.path().join("adv.toml");
    std::fs::write(&adv, "breaks_classical = true\nbreaks_pqc = true\ncompromised_nodes = [\"n01\"]\n").unwrap();
    match cmd_security_check("test3_dualpath".as_ref(), Some(&adv)).unwrap() {
        SecurityReport::Verdicts(v) => assert!(!v[0].verdict.data_compromised),
        SecurityReport::Matrix(_) => panic!("expected verdicts"),
    }
    std::fs::write(&adv, "breaks_classical = true\nbreaks_pqc = true\ncompromised_nodes = [\"n01\", \"s20\"]\n").unwrap();
    match cmd_security_check("test3_dualpath".as_ref(), Some(&adv)).unwrap() {
        SecurityReport::Verdicts(v) => assert!(v[0].verdict.data_compromised),
        SecurityReport::Matrix(_) => panic!("expected verdicts"),
    }
    match cmd_security_check("fig3".as_ref(), None).unwrap() {
        SecurityReport::Matrix(m) => assert_eq!(m[0].rows.len(), 16),
        SecurityReport::Verdicts(_) => panic!("expected matrix"),
    }
    std::fs::write(&adv, "compromised_nodes = [\"alice\"]\n").unwrap();
    assert_eq!(cmd_security_check("fig3".as_ref(), Some(&adv)).unwrap_err().exit_code(), 6);
}

#[test]
fn exit_codes_by_category() {
    let ok = qkdsim().args(["run", "--scenario", "fig3", "--until", "20"]).output().unwrap();
    assert!(ok.status.success());
    let s: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(s["scenario"], "fig3");

    let missing = qkdsim().args(["run", "--scenario", "/nonexistent.scn"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(3));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scn");
    std::fs::write(&bad, "schema_version = 1\nname = [").unwrap();
    let parse = qkdsim().args(["run", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(parse.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&parse.stderr).contains("error[parse]"));

    let mut spec = canned("fig3").unwrap();
    spec.faults.push(qkdsim_core::scenario::spec::FaultSpec {
        at_ms: 1000,
        kind: qkdsim_core::scenario::spec::FaultKind::KillNode,
        target: "mallory".into(),
    });
    let f = dir.path().join("fault.scn");
    std::fs::write(&f, serialize(&spec)).unwrap();
    let fault = qkdsim().args(["run", "--scenario"]).arg(&f).output().unwrap();
    assert!(matches!(fault.status.code(), Some(4 | 5)), "{:?}", fault.status);

    let usage = qkdsim().args(["run"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn serve_config_parses() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("links.toml");
    std::fs::write(&p, "local = \"alice\"\nseed = 1\nprefill = 100\n[[links]]\na = \"alice\"\nb = \"bob\"\nrate = 10.0\ncap = 1000\n").unwrap();
    let cfg = qkdsim_cli::load_serve_config(&p).unwrap();
    assert_eq!(cfg.local.as_str(), "alice");
    assert_eq!(cfg.links.len(), 1);
    std::fs::write(&p, "local = 3\n").unwrap();
    assert_eq!(qkdsim_cli::load_serve_config(&p).unwrap_err().exit_code(), 4);
}
