//! Seeded experiment grids over mechanism kind, perturbation mode, budget
//! and number of local steps, writing one metrics table per run.

pub mod config;
pub mod summary;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::accounting::Composition;
use crate::applications::{
    loadshed_reference, loadshed_sensitivity, logistic, make_synthetic, FeatureUniverse,
    SyntheticInstance,
};
use crate::engine::{common_smoothness, run_with_observer, RunConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::mechanism::{
    noise_magnitude, MechanismConfig, MechanismKind, NoiseNormalization, PerturbationMode,
    SensitivityRecord, SensitivitySource,
};
use crate::problem::{evaluate_global_objective, residuals};

pub use config::{apply_override, ExperimentConfig, OUTPUT_ROOT_VAR};
pub use summary::{summarize, FigureTables};

/// Column order of every metrics file.
pub const METRICS_HEADER: [&str; 10] = [
    "run_id",
    "seed",
    "t",
    "objective",
    "consensus_residual",
    "max_violation",
    "noise_magnitude",
    "eps_basic",
    "eps_strong",
    "wall_ms",
];

pub const SUMMARY_FILE: &str = "summary.csv";

/// One point of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub kind: MechanismKind,
    pub mode: PerturbationMode,
    pub epsilon: f64,
    pub local_steps: usize,
}

impl Cell {
    /// For example `obj-gaussian_eps0.05_E1`.
    pub fn name(&self) -> String {
        let mode = match self.mode {
            PerturbationMode::Objective => "obj",
            PerturbationMode::Output => "out",
        };
        format!(
            "{mode}-{}_eps{}_E{}",
            self.kind, self.epsilon, self.local_steps
        )
    }

    pub fn file_name(&self, rep: usize) -> String {
        format!("{}_rep{rep}.csv", self.name())
    }
}

/// Grid cells in the order modes, kinds, budgets, local steps.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &mode in &cfg.mechanism.modes {
        for &kind in &cfg.mechanism.kinds {
            for &epsilon in &cfg.mechanism.epsilons {
                for &local_steps in &cfg.run.local_steps {
                    out.push(Cell {
                        index: out.len(),
                        kind,
                        mode,
                        epsilon,
                        local_steps,
                    });
                }
            }
        }
    }
    out
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Noise seed of repetition `rep` of cell `cell`.
pub fn derive_seed(base: u64, cell: usize, rep: usize) -> u64 {
    splitmix(splitmix(base ^ splitmix(cell as u64)) ^ rep as u64)
}

/// Shortest decimal that round-trips to the same `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:?}")
}

/// One metrics row; see [`METRICS_HEADER`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub t: usize,
    pub objective: f64,
    pub consensus_residual: f64,
    pub max_violation: f64,
    pub noise_magnitude: f64,
    pub eps_basic: f64,
    pub eps_strong: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.run_id.clone(),
            self.seed.to_string(),
            self.t.to_string(),
            format_float(self.objective),
            format_float(self.consensus_residual),
            format_float(self.max_violation),
            format_float(self.noise_magnitude),
            format_float(self.eps_basic),
            format_float(self.eps_strong),
            format_float(self.wall_ms),
        ]
    }
}

/// Final-round figures of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub cell: usize,
    pub rep: usize,
    pub seed: u64,
    pub objective: f64,
    pub gap: Option<f64>,
    pub consensus: f64,
    pub violation: f64,
    /// Largest violation over all rounds.
    pub peak_violation: f64,
    /// Noise magnitude summed over all rounds.
    pub noise_total: f64,
    pub test_loss: Option<f64>,
    pub test_error: Option<f64>,
    pub eps_basic: f64,
    pub eps_strong: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub cells: Vec<Cell>,
    pub runs: Vec<RunResult>,
    pub summary_path: PathBuf,
}

/// Instance shared by every cell, with the reference optimum when known.
struct Context {
    instance: SyntheticInstance,
    optimum: Option<f64>,
}

impl Context {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let instance = make_synthetic(&cfg.problem, cfg.run.seed)?;
        let optimum = match &instance {
            SyntheticInstance::ConsensusQp(i) => Some(i.optimal_value),
            SyntheticInstance::Loadshed(i) => {
                let bound = match &cfg.problem {
                    crate::applications::SyntheticSpec::Loadshed(s) => s.bound,
                    _ => unreachable!("instance kind matches the problem config"),
                };
                Some(loadshed_reference(&i.zones, bound, 20_000).1)
            }
            SyntheticInstance::Logistic(_) => None,
        };
        Ok(Self { instance, optimum })
    }

    fn sensitivity(&self, cfg: &ExperimentConfig, mode: PerturbationMode) -> Result<SensitivitySource> {
        if let Some(s) = cfg.mechanism.sensitivity {
            return Ok(SensitivitySource::Constant(SensitivityRecord::uniform(s)?));
        }
        Ok(match &self.instance {
            SyntheticInstance::Logistic(i) => logistic::logistic_sensitivity_source(
                FeatureUniverse::UnitBall,
                i.dataset.total(),
                i.dataset.features,
                i.dataset.classes,
                mode,
            ),
            SyntheticInstance::Loadshed(_) | SyntheticInstance::ConsensusQp(_) => {
                SensitivitySource::Constant(loadshed_sensitivity(cfg.mechanism.beta, mode)?)
            }
        })
    }
}

fn mechanism_for(cfg: &ExperimentConfig, ctx: &Context, cell: &Cell) -> Result<MechanismConfig> {
    MechanismConfig::new(
        cell.kind,
        cell.epsilon,
        cfg.mechanism.delta,
        cell.mode,
        ctx.sensitivity(cfg, cell.mode)?,
    )
}

fn schedule_for(cfg: &ExperimentConfig, ctx: &Context, cell: &Cell) -> ScheduleConfig {
    let regime = cfg
        .schedule
        .eta_regime
        .unwrap_or_else(|| common_smoothness(ctx.instance.problem()).regime());
    ScheduleConfig {
        rho: cfg.schedule.rho,
        eta_regime: regime,
        epsilon: cell.epsilon,
    }
}

/// Checks everything that can fail before any run starts: the config, the
/// instance, each cell's mechanism and schedule, and the output directory.
pub fn check(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let ctx = Context::new(cfg)?;
    let grid = cells(cfg);
    for cell in &grid {
        mechanism_for(cfg, &ctx, cell)?;
        let s = schedule_for(cfg, &ctx, cell);
        s.validate()?;
        crate::engine::eta_schedule(&s, &common_smoothness(ctx.instance.problem()), 1)?;
    }
    Ok(grid)
}

fn prepare_output(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")
        .map_err(|e| Error::Config(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let grid = check(cfg)?;
    let dir = cfg.output_dir();
    prepare_output(&dir)?;
    let ctx = Context::new(cfg)?;

    let jobs: Vec<(usize, usize)> = grid
        .iter()
        .flat_map(|c| (0..cfg.run.repetitions).map(move |r| (c.index, r)))
        .collect();
    let work = |&(cell, rep): &(usize, usize)| run_one(cfg, &ctx, &grid[cell], rep, &dir);
    let results: Vec<Result<RunResult>> = if cfg.run.parallel_cells {
        jobs.par_iter().map(work).collect()
    } else {
        jobs.iter().map(work).collect()
    };

    let mut runs = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::error!("run failed: {e}");
                first_error.get_or_insert(e);
            }
        }
    }
    let summary_path = dir.join(SUMMARY_FILE);
    summary::write_summary(&summary_path, &grid, &runs, cfg.run.repetitions)?;
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(ExperimentReport {
        output_dir: dir,
        cells: grid,
        runs,
        summary_path,
    })
}

fn run_one(
    cfg: &ExperimentConfig,
    ctx: &Context,
    cell: &Cell,
    rep: usize,
    dir: &Path,
) -> Result<RunResult> {
    let problem = ctx.instance.problem();
    let mechanism = mechanism_for(cfg, ctx, cell)?;
    let schedule = schedule_for(cfg, ctx, cell);
    let seed = derive_seed(cfg.run.seed, cell.index, rep);
    let mut run_cfg = RunConfig::new(cfg.run.rounds, cell.local_steps, seed);
    run_cfg.parallel_agents = cfg.run.parallel_agents;
    let run_id = format!("{}_rep{rep}", cell.name());
    let normalization: NoiseNormalization = cfg.output.normalization;
    let private = mechanism.is_private();

    let mut rows: Vec<MetricsRow> = Vec::with_capacity(cfg.run.rounds);
    let mut failure: Option<Error> = None;
    let mut noise_total = 0.0;
    let mut peak_violation: f64 = 0.0;
    let start = Instant::now();
    let out = run_with_observer(problem, &schedule, &mechanism, &run_cfg, |report| {
        if failure.is_some() {
            return;
        }
        let objective = match evaluate_global_objective(problem, &report.state.z) {
            Ok(v) => v,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let res = match residuals(problem, report.state) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let draws: Vec<Vec<f64>> = report.noise.iter().flatten().cloned().collect();
        let noise = noise_magnitude(&draws, normalization);
        noise_total += noise;
        peak_violation = peak_violation.max(res.violation);
        let (eps_basic, eps_strong) = if private {
            (
                report
                    .ledger
                    .compose(Composition::Basic)
                    .map_or(f64::NAN, |t| t.epsilon),
                report
                    .ledger
                    .compose(Composition::Strong)
                    .map_or(f64::NAN, |t| t.epsilon),
            )
        } else {
            (f64::INFINITY, f64::INFINITY)
        };
        rows.push(MetricsRow {
            run_id: run_id.clone(),
            seed,
            t: report.round,
            objective,
            consensus_residual: res.consensus,
            max_violation: res.violation,
            noise_magnitude: noise,
            eps_basic,
            eps_strong,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    let path = dir.join(cell.file_name(rep));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(METRICS_HEADER)?;
    for row in &rows {
        w.write_record(row.to_record())?;
    }
    w.flush()?;

    let last = rows.last().expect("at least one round ran");
    let (test_loss, test_error) = match &ctx.instance {
        SyntheticInstance::Logistic(i) => (
            Some(logistic::cross_entropy(
                &i.test_features,
                &i.test_labels,
                i.dataset.classes,
                &out.state.w,
            )),
            Some(logistic::classification_error(
                &i.test_features,
                &i.test_labels,
                i.dataset.classes,
                &out.state.w,
            )),
        ),
        _ => (None, None),
    };
    Ok(RunResult {
        cell: cell.index,
        rep,
        seed,
        objective: last.objective,
        gap: ctx.optimum.map(|o| last.objective - o),
        consensus: last.consensus_residual,
        violation: last.max_violation,
        peak_violation,
        noise_total,
        test_loss,
        test_error,
        eps_basic: last.eps_basic,
        eps_strong: last.eps_strong,
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_names() {
        let c = Cell {
            index: 0,
            kind: MechanismKind::Gaussian,
            mode: PerturbationMode::Objective,
            epsilon: 0.05,
            local_steps: 1,
        };
        assert_eq!(c.file_name(0), "obj-gaussian_eps0.05_E1_rep0.csv");
        let inf = Cell {
            epsilon: f64::INFINITY,
            mode: PerturbationMode::Output,
            kind: MechanismKind::Laplace,
            ..c
        };
        assert_eq!(inf.name(), "out-laplace_epsinf_E1");
    }

    #[test]
    fn seeds_differ_across_cells_and_reps() {
        let mut seen = std::collections::HashSet::new();
        for cell in 0..20 {
            for rep in 0..20 {
                assert!(seen.insert(derive_seed(7, cell, rep)));
            }
        }
    }

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1e-300, 12345.678, -0.0, 1.0 / 3.0] {
            assert_eq!(format_float(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_float(f64::INFINITY), "inf");
        assert_eq!(format_float(f64::NAN), "NaN");
    }
}
