//! Per-cell statistics of an experiment and round-by-round figure tables
//! rebuilt from its metrics files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{format_float, Cell, RunResult, METRICS_HEADER, SUMMARY_FILE};

pub const SUMMARY_HEADER: [&str; 23] = [
    "cell",
    "mechanism",
    "mode",
    "epsilon",
    "local_steps",
    "repetitions",
    "objective_mean",
    "objective_std",
    "gap_mean",
    "gap_std",
    "consensus_mean",
    "consensus_std",
    "violation_mean",
    "violation_std",
    "infeasible_fraction",
    "noise_mean",
    "noise_std",
    "test_loss_mean",
    "test_loss_std",
    "test_error_mean",
    "test_error_std",
    "eps_basic",
    "eps_strong",
];

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn pair(xs: &[f64]) -> [String; 2] {
    if xs.is_empty() {
        return [String::new(), String::new()];
    }
    let (m, s) = mean_std(xs);
    [format_float(m), format_float(s)]
}

pub(crate) fn write_summary(
    path: &Path,
    cells: &[Cell],
    runs: &[RunResult],
    repetitions: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for cell in cells {
        let rs: Vec<&RunResult> = runs.iter().filter(|r| r.cell == cell.index).collect();
        if rs.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&RunResult) -> Option<f64>| -> Vec<f64> {
            rs.iter().filter_map(|r| f(r)).collect()
        };
        let infeasible = rs.iter().filter(|r| r.peak_violation > 0.0).count() as f64 / rs.len() as f64;
        let mut record = vec![
            cell.name(),
            cell.kind.to_string(),
            format!("{:?}", cell.mode).to_lowercase(),
            format_float(cell.epsilon),
            cell.local_steps.to_string(),
            format!("{}/{repetitions}", rs.len()),
        ];
        record.extend(pair(&col(&|r| Some(r.objective))));
        record.extend(pair(&col(&|r| r.gap)));
        record.extend(pair(&col(&|r| Some(r.consensus))));
        record.extend(pair(&col(&|r| Some(r.violation))));
        record.push(format_float(infeasible));
        record.extend(pair(&col(&|r| Some(r.noise_total))));
        record.extend(pair(&col(&|r| r.test_loss)));
        record.extend(pair(&col(&|r| r.test_error)));
        record.push(format_float(rs[0].eps_basic));
        record.push(format_float(rs[0].eps_strong));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Round-by-round means over repetitions, one column per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FigureTables {
    pub cells: Vec<String>,
    pub rounds: Vec<usize>,
    /// Indexed `[metric][round][cell]`, metrics in [`FIGURE_METRICS`] order.
    pub values: Vec<Vec<Vec<f64>>>,
    pub files: Vec<PathBuf>,
}

/// Metric column and output file name of each figure table.
pub const FIGURE_METRICS: [(&str, &str); 4] = [
    ("noise_magnitude", "figure_noise.csv"),
    ("objective", "figure_objective.csv"),
    ("consensus_residual", "figure_feasibility.csv"),
    ("max_violation", "figure_violation.csv"),
];

type Series = BTreeMap<usize, Vec<f64>>;

/// Reads every `*_rep<k>.csv` in `dir` and writes the figure tables next to
/// them.
pub fn summarize(dir: &Path) -> Result<FigureTables> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| run_cell_name(p).is_some())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no metrics files in {}", dir.display())));
    }

    let idx: Vec<usize> = FIGURE_METRICS
        .iter()
        .map(|(m, _)| METRICS_HEADER.iter().position(|h| h == m).expect("known column"))
        .collect();
    // cell -> metric -> round -> values over repetitions
    let mut acc: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for path in &files {
        let cell = run_cell_name(path).expect("filtered above");
        let series = acc
            .entry(cell)
            .or_insert_with(|| vec![Series::new(); FIGURE_METRICS.len()]);
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().ne(METRICS_HEADER.iter().copied()) {
            return Err(Error::Input(format!("{} has unexpected columns", path.display())));
        }
        for rec in r.records() {
            let rec = rec?;
            let t: usize = parse(&rec[2], path)?;
            for (m, &c) in idx.iter().enumerate() {
                series[m].entry(t).or_default().push(parse(&rec[c], path)?);
            }
        }
    }

    let cells: Vec<String> = acc.keys().cloned().collect();
    let mut rounds: Vec<usize> = acc
        .values()
        .flat_map(|s| s[0].keys().copied())
        .collect();
    rounds.sort_unstable();
    rounds.dedup();

    let mut values = Vec::with_capacity(FIGURE_METRICS.len());
    let mut written = Vec::with_capacity(FIGURE_METRICS.len());
    for (m, (_, file)) in FIGURE_METRICS.iter().enumerate() {
        let table: Vec<Vec<f64>> = rounds
            .iter()
            .map(|t| {
                cells
                    .iter()
                    .map(|c| acc[c][m].get(t).map_or(f64::NAN, |v| mean_std(v).0))
                    .collect()
            })
            .collect();
        let path = dir.join(file);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["t".to_string()];
        header.extend(cells.iter().cloned());
        w.write_record(&header)?;
        for (t, row) in rounds.iter().zip(&table) {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|&x| format_float(x)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        values.push(table);
        written.push(path);
    }
    Ok(FigureTables {
        cells,
        rounds,
        values,
        files: written,
    })
}

fn parse<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Input(format!("{}: cannot parse {s:?}", path.display())))
}

/// `obj-gaussian_eps0.05_E1` for `.../obj-gaussian_eps0.05_E1_rep3.csv`.
fn run_cell_name(path: &Path) -> Option<String> {
    if path.extension()? != "csv" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    let (cell, rep) = stem.rsplit_once("_rep")?;
    if rep.is_empty() || !rep.bytes().all(|b| b.is_ascii_digit()) || stem == SUMMARY_FILE {
        return None;
    }
    Some(cell.to_string())
}
