//! End-to-end tests driving the `hetloc` binary through the full
//! pipeline: world generation, data generation, training, calibration,
//! adaptation, evaluation and the experiment matrix.

use std::path::Path;
use std::process::{Command, Output};

fn hetloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = hetloc(dir, args);
    assert!(
        out.status.success(),
        "hetloc {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small world shared by the pipeline tests: 6 towers, 2x2 cells.
fn gen_small_world(dir: &Path) {
    run_ok(
        dir,
        &[
            "genworld",
            "--seed",
            "42",
            "--width",
            "200",
            "--height",
            "200",
            "--cell-size",
            "100",
            "--towers",
            "6",
            "--shadowing-sigma-db",
            "1.0",
            "--out",
            "world.json",
        ],
    );
}

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    gen_small_world(dir);
    assert!(dir.join("world.json").is_file());

    // co-timed master and slave logs share the stream seed
    for (device, offset) in [("master", "0"), ("slave", "8")] {
        run_ok(
            dir,
            &[
                "gendata",
                "--world",
                "world.json",
                "--device-id",
                device,
                "--offset-db",
                offset,
                "--samples-per-cell",
                "30",
                "--stream-seed",
                "7",
                "--out",
                &format!("{device}.log"),
            ],
        );
    }
    run_ok(
        dir,
        &[
            "gendata",
            "--world",
            "world.json",
            "--device-id",
            "slave",
            "--offset-db",
            "8",
            "--samples-per-cell",
            "10",
            "--stream-seed",
            "9",
            "--out",
            "slave_test.log",
        ],
    );

    run_ok(
        dir,
        &[
            "train",
            "--world",
            "world.json",
            "--scans",
            "master.log",
            "--seed",
            "5",
            "--epochs",
            "20",
            "--out",
            "model.json",
        ],
    );
    assert!(dir.join("model.json").is_file());

    run_ok(
        dir,
        &[
            "calibrate",
            "--world",
            "world.json",
            "--master",
            "master.log",
            "--slave",
            "slave.log",
            "--out",
            "map.json",
        ],
    );
    assert!(dir.join("map.json").is_file());

    let eval = run_ok(
        dir,
        &[
            "evaluate",
            "--world",
            "world.json",
            "--model",
            "model.json",
            "--scans",
            "slave_test.log",
            "--calibration",
            "map.json",
            "--errors-out",
            "errors.csv",
        ],
    );
    assert!(eval.contains("p50"), "summary line missing: {eval}");
    let errors = std::fs::read_to_string(dir.join("errors.csv")).unwrap();
    assert_eq!(
        errors.lines().count(),
        41,
        "header + one row per test sample"
    );

    run_ok(
        dir,
        &[
            "adapt",
            "--world",
            "world.json",
            "--model",
            "model.json",
            "--scans",
            "slave.log",
            "--epochs",
            "10",
            "--warm-start",
            "--out",
            "adapted.json",
        ],
    );
    assert!(dir.join("adapted.json").is_file());
}

#[test]
fn matrix_writes_reports_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run_ok(
        dir,
        &[
            "matrix",
            "--seed",
            "11",
            "--epochs",
            "2",
            "--train-samples-per-cell",
            "3",
            "--calibration-samples-per-cell",
            "3",
            "--test-samples-per-cell",
            "2",
            "--technique",
            "none",
            "--technique",
            "linear",
            "--out",
            "reports",
        ],
    );
    assert!(out.contains("p50"), "per-row summaries missing: {out}");
    assert!(dir.join("reports/results.csv").is_file());
    assert!(dir.join("reports/summary.csv").is_file());
    let results = std::fs::read_to_string(dir.join("reports/results.csv")).unwrap();
    // 4 experiments x 2 techniques x 3 percentiles + header
    assert_eq!(
        results.lines().count(),
        25,
        "unexpected results.csv:\n{results}"
    );
}

#[test]
fn matrix_requires_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hetloc(tmp.path(), &["matrix", "--out", "reports"]);
    assert!(!out.status.success(), "matrix without --seed must fail");
}

#[test]
fn missing_world_file_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = hetloc(
        tmp.path(),
        &[
            "gendata",
            "--world",
            "absent.json",
            "--device-id",
            "d",
            "--out",
            "x.log",
        ],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("absent.json"),
        "stderr should name the file: {stderr}"
    );
}
