use std::fs;
use std::path::Path;

use dpadmm::experiment::{check, run_experiment, summarize, ExperimentConfig, METRICS_HEADER, SUMMARY_FILE};
use dpadmm::Error;

fn config(dir: &Path) -> ExperimentConfig {
    let text = format!(
        r#"
[problem]
kind = "consensus-qp"
agents = 3
dimension = 2
bound = 0.5

[mechanism]
kinds = ["gaussian", "laplace"]
modes = ["objective", "output"]
epsilons = [0.5]

[run]
seed = 5
rounds = 8
local_steps = [1, 2]
repetitions = 2

[output]
dir = {:?}
"#,
        dir.display().to_string()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn read_without_wall_time(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let wall = r.headers().unwrap().iter().position(|h| h == "wall_ms").unwrap();
    r.records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != wall)
                .map(|(_, s)| s.to_string())
                .collect()
        })
        .collect()
}

#[test]
fn grid_writes_one_file_per_run_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let cells = check(&cfg).unwrap();
    assert_eq!(cells.len(), 2 * 2 * 2);
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.runs.len(), 16);
    for run in &report.runs {
        let mut r = csv::Reader::from_path(&run.path).unwrap();
        assert!(r.headers().unwrap().iter().eq(METRICS_HEADER.iter().copied()));
        assert_eq!(r.records().count(), 8);
    }
    let mut summary = csv::Reader::from_path(tmp.path().join(SUMMARY_FILE)).unwrap();
    let rows: Vec<csv::StringRecord> = summary.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| &r[5] == "2/2"));
}

#[test]
fn reruns_reproduce_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&config(a.path())).unwrap();
    run_experiment(&config(b.path())).unwrap();
    for run in &ra.runs {
        let name = run.path.file_name().unwrap();
        assert_eq!(
            read_without_wall_time(&run.path),
            read_without_wall_time(&b.path().join(name))
        );
    }
}

#[test]
fn serial_and_parallel_grids_agree() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut serial = config(a.path());
    serial.run.parallel_cells = false;
    let ra = run_experiment(&serial).unwrap();
    let rb = run_experiment(&config(b.path())).unwrap();
    for (x, y) in ra.runs.iter().zip(&rb.runs) {
        assert_eq!((x.cell, x.rep, x.seed), (y.cell, y.rep, y.seed));
        assert_eq!(x.objective, y.objective);
    }
}

#[test]
fn summarize_averages_repetitions() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_experiment(&config(tmp.path())).unwrap();
    let tables = summarize(tmp.path()).unwrap();
    assert_eq!(tables.cells.len(), 8);
    assert_eq!(tables.rounds, (1..=8).collect::<Vec<_>>());
    for f in &tables.files {
        assert!(f.exists());
    }

    // Objective table, last round, first cell: mean of the two repetitions.
    let cell = &report.cells[0];
    let last = |rep: usize| -> f64 {
        let path = tmp.path().join(cell.file_name(rep));
        let rows = read_without_wall_time(&path);
        rows.last().unwrap()[3].parse().unwrap()
    };
    let column = tables.cells.iter().position(|c| *c == cell.name()).unwrap();
    let expected = 0.5 * (last(0) + last(1));
    assert!((tables.values[1][7][column] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

#[test]
fn summarize_rejects_an_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("notes.txt"), "x").unwrap();
    assert!(matches!(summarize(tmp.path()), Err(Error::Input(_))));
}

#[test]
fn unwritable_output_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = config(&blocker.join("out"));
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
}

#[test]
fn invalid_grid_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.mechanism.epsilons = vec![-1.0];
    assert!(check(&cfg).is_err());
}
