use std::path::Path;
use std::process::{Command, Output};

use bsfa::report::{RunReport, TraceFile};

fn bsfa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsfa"))
        .args(args)
        .current_dir(dir)
        .env_remove("BSFA_INJECT_FAULT")
        .output()
        .unwrap()
}

fn gen_dump(dir: &Path) {
    let out = bsfa(
        &["gen", "--kind", "model-dump", "--n", "512", "--d", "32", "--layers", "2", "--heads", "2", "--samples", "3", "--out", "dump"],
        dir,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_calibrate_verify_flow() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_dump(p);
    assert!(p.join("dump/manifest.json").exists());
    let out = bsfa(&["calibrate", "--data", "dump", "--k", "1,2,4", "--out", "t.bsfa"], p);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("k"));
    let out = bsfa(
        &["verify", "--data", "dump", "--gate", "threshold", "--thresholds", "t.bsfa", "--k", "2", "--trace", "trace.json"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    let traces = TraceFile::read(p.join("trace.json")).unwrap();
    assert_eq!(traces.traces.len(), 3);
    assert_eq!(traces.traces[0].heads.len(), 4);
}

#[test]
fn every_gate_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_dump(p);
    for gate in [
        &["--gate", "dense"][..],
        &["--gate", "frontier"],
        &["--gate", "window", "--window", "200"],
        &["--gate", "running-max", "--lambda", "-2.5"],
    ] {
        let mut args = vec!["verify", "--data", "dump"];
        args.extend_from_slice(gate);
        let out = bsfa(&args, p);
        assert_eq!(out.status.code(), Some(0), "{gate:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bench_report_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_dump(p);
    bsfa(&["calibrate", "--data", "dump", "--k", "2", "--out", "t.bsfa"], p);
    let out = bsfa(
        &["--json", "r.json", "bench", "--data", "dump", "--gate", "threshold", "--thresholds", "t.bsfa", "--k", "2", "--repeat", "2", "--warmup", "0"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = RunReport::read(p.join("r.json")).unwrap();
    assert_eq!(report.config.n, 512);
    assert_eq!(report.config.gate, "threshold");
    let timing = report.timing.unwrap();
    assert_eq!(timing.repeats, 2);
    assert!(timing.mean_ms > 0.0);
    assert!(report.density.measured_mean > 0.0 && report.density.measured_mean <= 1.0);
    assert!(report.generated_at.ends_with('Z'));
}

#[test]
fn density_command_reports_analytic_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsfa(&["density", "--n", "32768", "--k", "64"], dir.path());
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0.24"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let code = |args: &[&str]| bsfa(args, p).status.code();
    assert_eq!(code(&["gen", "--kind", "needle", "--n", "4096", "--needle-pos", "4096", "--out", "x"]), Some(2));
    assert_eq!(code(&["bogus"]), Some(2));
    assert_eq!(code(&["calibrate", "--data", "missing", "--k", "1", "--out", "t.bsfa"]), Some(3));
    gen_dump(p);
    assert_eq!(code(&["calibrate", "--data", "dump", "--k", "8,4", "--out", "t.bsfa"]), Some(2));
    std::fs::write(p.join("junk.bsfa"), b"not a threshold file").unwrap();
    assert_eq!(code(&["verify", "--data", "dump", "--gate", "threshold", "--thresholds", "junk.bsfa", "--k", "1"]), Some(3));
    assert_eq!(code(&["calibrate", "--data", "dump", "--k", "1", "--out", "t.bsfa"]), Some(0));
    assert_eq!(code(&["verify", "--data", "dump", "--gate", "threshold", "--thresholds", "t.bsfa", "--k", "3"]), Some(2));
    assert_eq!(code(&["--bm", "96", "verify", "--data", "dump"]), Some(2));
}

#[test]
fn injected_fault_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_dump(p);
    let out = Command::new(env!("CARGO_BIN_EXE_bsfa"))
        .args(["verify", "--data", "dump", "--gate", "dense"])
        .current_dir(p)
        .env("BSFA_INJECT_FAULT", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn needle_gen_writes_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = bsfa(&["gen", "--kind", "needle", "--n", "4096", "--needle-pos", "1024", "--strength", "10", "--out", "n"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dump = bsfa::CalibrationDump::read(dir.path().join("n")).unwrap();
    assert_eq!(dump.samples.len(), 1);
}
