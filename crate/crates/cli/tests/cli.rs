//! End-to-end runs of the `tsfc-mini` binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsfc-mini")).args(args).env_remove("TSFC_MINI_SEED").output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8(b.to_vec()).unwrap()
}

#[test]
fn compile_writes_kernels_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("helmholtz.c");
    let r = run(&["compile", data("helmholtz.dsl").to_str().unwrap(), "-o", out.to_str().unwrap(), "--header"]);
    assert!(r.status.success(), "{}", text(&r.stderr));
    let c = std::fs::read_to_string(&out).unwrap();
    assert!(c.starts_with("/* Generated by tsfc-mini from helmholtz.dsl */\n#include <math.h>\n"));
    assert!(c.contains("void a(double *restrict A, const double *restrict coords)"), "{c}");
    let h = std::fs::read_to_string(dir.path().join("helmholtz.h")).unwrap();
    assert!(h.starts_with("#ifndef HELMHOLTZ_H\n#define HELMHOLTZ_H\n"));
    assert!(h.contains("void L("));
}

#[test]
fn compile_without_output_prints_c_deterministically() {
    let input = data("facet_jump.dsl");
    let a = run(&["compile", input.to_str().unwrap()]);
    let b = run(&["compile", input.to_str().unwrap()]);
    assert!(a.status.success());
    assert!(text(&a.stdout).contains("void dg_pm("));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn schedule_dump_matches_the_worked_example() {
    let input = data("laplace_p2.dsl");
    let r = run(&["compile", input.to_str().unwrap(), "--dump-schedule", "--no-unroll", "--no-fast-jacobian", "--no-cellwise-const"]);
    assert!(r.status.success());
    let golden = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/laplace_p2.schedule")).unwrap();
    assert_eq!(text(&r.stdout), format!("== a\n{golden}"));
}

#[test]
fn other_dumps() {
    let input = data("facet_jump.dsl");
    let r = run(&["compile", input.to_str().unwrap(), "--dump-blocks", "--dump-gem"]);
    assert!(r.status.success());
    let out = text(&r.stdout);
    assert!(out.contains("dg_mp (-,+): "));
    assert!(out.contains("== nitsche\n0: "));
    assert!(!out.contains("#include"));
}

#[test]
fn malformed_input_is_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dsl");
    std::fs::write(&bad, "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nform L = cell integral v *\n").unwrap();
    let r = run(&["compile", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    let err = text(&r.stderr);
    assert!(err.contains("bad.dsl:4:") && err.contains("syntax error"), "{err}");
    assert!(r.stdout.is_empty());
}

#[test]
fn semantic_errors_name_the_form() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dsl");
    std::fs::write(&bad, "cell triangle coord_degree 1\nspace V lagrange 1\nargument v test V\nform L = cell integral v * v\n").unwrap();
    let r = run(&["compile", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(text(&r.stderr).contains("bad.dsl"), "{}", text(&r.stderr));
}

#[test]
fn check_passes_on_the_corpus() {
    let a = data("laplace_p2.dsl");
    let b = data("facet_jump.dsl");
    let r = run(&["check", "--samples", "10", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(r.status.success(), "{}", text(&r.stdout));
    let out = text(&r.stdout);
    assert!(out.contains("PASS laplace_p2.dsl:a max error"));
    let dg = out.lines().find(|l| l.contains("facet_jump.dsl:dg")).unwrap();
    assert!(dg.starts_with("PASS") && !dg.contains("blocks/doubled -"), "{dg}");
}

#[test]
fn check_fails_on_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dsl");
    std::fs::write(&bad, "cell triangle coord_degree 1\nform a = cell integral\n").unwrap();
    let r = run(&["check", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn seed_comes_from_the_environment() {
    let input = data("mass.dsl");
    let r = Command::new(env!("CARGO_BIN_EXE_tsfc-mini"))
        .args(["check", "--samples", "2", input.to_str().unwrap()])
        .env("TSFC_MINI_SEED", "7")
        .output()
        .unwrap();
    assert!(r.status.success());
    assert!(text(&r.stdout).starts_with("seed 7,"));
    let r = Command::new(env!("CARGO_BIN_EXE_tsfc-mini"))
        .args(["check", input.to_str().unwrap()])
        .env("TSFC_MINI_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn bench_reports_linear_visits() {
    let r = run(&["bench", "--max-depth", "12", "--rungs", "2"]);
    assert!(r.status.success());
    let out = text(&r.stdout);
    assert!(out.contains("visits linear in depth: yes"));
    assert!(out.contains("counts identical across 2 runs: yes"));
    assert!(out.lines().any(|l| l.split_whitespace().take(2).eq(["12", "25"])), "{out}");
}

#[test]
fn conflicting_unroll_flags_are_rejected() {
    let input = data("mass.dsl");
    let r = run(&["compile", input.to_str().unwrap(), "--no-unroll", "--unroll-threshold", "2"]);
    assert!(!r.status.success());
}
