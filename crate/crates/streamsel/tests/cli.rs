//! End-to-end checks of the compiled binary: outputs, exit codes,
//! determinism of the generated artifacts.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamsel"))
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.txt");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn single_round_run_writes_header_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "rounds = 1\nstrategy = rs\nseeds = 7\n");
    let status = bin()
        .args(["run", "--config", &cfg, "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert!(status.success());
    let lines = read_lines(&dir.path().join("out/metrics_rs_s7.csv"));
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("round,strategy,"));
    assert!(lines[1].starts_with("0,rs,"));
}

#[test]
fn every_strategy_and_seed_gets_a_metrics_file_of_equal_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "rounds = 5\nstrategy = cis, rs\nseeds = 1, 2\n");
    assert!(
        bin()
            .args(["run", "--config", &cfg, "--out"])
            .arg(dir.path().join("out"))
            .status()
            .unwrap()
            .success()
    );
    let mut counts = Vec::new();
    for strat in ["cis", "rs"] {
        for seed in [1, 2] {
            counts.push(read_lines(&dir.path().join(format!("out/metrics_{strat}_s{seed}.csv"))).len());
        }
    }
    assert_eq!(counts, vec![6; 4]);
    assert!(dir.path().join("out/summary.json").exists());
}

#[test]
fn dump_plan_writes_one_plan_file_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "rounds = 2\nstrategy = cis\nseeds = 3\n");
    assert!(
        bin()
            .args(["run", "--config", &cfg, "--dump-plan", "--out"])
            .arg(dir.path().join("out"))
            .status()
            .unwrap()
            .success()
    );
    let plans: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/plans_cis_s3.json")).unwrap())
            .unwrap();
    assert_eq!(plans.as_array().unwrap().len(), 2);
}

#[test]
fn gen_data_is_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        assert!(
            bin()
                .args(["--seed", "5", "gen-data", "--samples", "120", "--path"])
                .arg(&path)
                .arg("--out")
                .arg(dir.path())
                .status()
                .unwrap()
                .success()
        );
        std::fs::read(path).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    assert_eq!(a, b);

    // The generated file drives a csv-stream run.
    let cfg = write_cfg(
        dir.path(),
        &format!(
            "rounds = 2\nstrategy = rs\nseeds = 1\nstream = csv\ncsv_path = {}\nvelocity = 40\nbatch_size = 5\nholdout = 20\n",
            dir.path().join("a.csv").display()
        ),
    );
    assert!(
        bin()
            .args(["run", "--config", &cfg, "--out"])
            .arg(dir.path().join("out"))
            .status()
            .unwrap()
            .success()
    );
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "no_such_key = 1\n");
    let status = bin()
        .args(["run", "--config", &cfg, "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn invalid_batch_velocity_combination_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "batch_size = 50\nvelocity = 10\n");
    let status = bin()
        .args(["run", "--config", &cfg, "--out"])
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn alloc_check_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(
        bin()
            .args(["--seed", "4", "alloc-check", "--sweeps", "500", "--out"])
            .arg(dir.path())
            .status()
            .unwrap()
            .success()
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("alloc_check.json")).unwrap())
            .unwrap();
    assert_eq!(report["integer_ok"], true);
    assert_eq!(report["continuous_ok"], true);
}
