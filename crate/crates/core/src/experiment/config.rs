//! Experiment configuration: a TOML file with `problem`, `mechanism`,
//! `run`, `schedule` and `output` sections, plus `section.key=value`
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::applications::SyntheticSpec;
use crate::engine::RhoSchedule;
use crate::error::{Error, Result};
use crate::mechanism::{MechanismKind, NoiseNormalization, PerturbationMode};
use crate::problem::Regime;

/// Environment variable prefixed to relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "DPADMM_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: SyntheticSpec,
    #[serde(default)]
    pub mechanism: MechanismGrid,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MechanismGrid {
    pub kinds: Vec<MechanismKind>,
    pub modes: Vec<PerturbationMode>,
    /// Per-step budgets; `inf` runs without noise.
    pub epsilons: Vec<f64>,
    pub delta: f64,
    /// Adjacency level for the constant sensitivities of the load-shedding
    /// and consensus problems.
    pub beta: f64,
    /// Fixed sensitivity (both norms) replacing the problem's own oracle.
    pub sensitivity: Option<f64>,
}

impl Default for MechanismGrid {
    fn default() -> Self {
        Self {
            kinds: vec![MechanismKind::Gaussian],
            modes: vec![PerturbationMode::Objective],
            epsilons: vec![f64::INFINITY],
            delta: 1e-6,
            beta: 0.01,
            sensitivity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Seeds the problem instance and, mixed with the cell and repetition
    /// indices, every run's noise.
    pub seed: u64,
    pub rounds: usize,
    pub local_steps: Vec<usize>,
    pub repetitions: usize,
    pub parallel_cells: bool,
    pub parallel_agents: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 100,
            local_steps: vec![1],
            repetitions: 1,
            parallel_cells: true,
            parallel_agents: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub rho: RhoSchedule,
    /// Step-size regime; defaults to the problem's own.
    pub eta_regime: Option<Regime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub normalization: NoiseNormalization,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            normalization: NoiseNormalization::Total,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `overrides` of the form `section.key=value`
    /// before deserializing.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mechanism;
        if m.kinds.is_empty() || m.modes.is_empty() || m.epsilons.is_empty() {
            return Err(Error::Config(
                "mechanism kinds, modes and epsilons must be nonempty".into(),
            ));
        }
        if let Some(e) = m.epsilons.iter().find(|e| !(**e > 0.0)) {
            return Err(Error::Config(format!("epsilon values must be positive, got {e}")));
        }
        if m.kinds.contains(&MechanismKind::Gaussian) && !(m.delta > 0.0 && m.delta < 1.0) {
            return Err(Error::Config(format!(
                "Gaussian mechanism requires delta in (0, 1), got {}",
                m.delta
            )));
        }
        if !(m.beta > 0.0) {
            return Err(Error::Config(format!("beta must be positive, got {}", m.beta)));
        }
        if let Some(s) = m.sensitivity {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("invalid sensitivity {s}")));
            }
        }
        let r = &self.run;
        if r.rounds == 0 || r.repetitions == 0 {
            return Err(Error::Config("rounds and repetitions must be at least 1".into()));
        }
        if r.local_steps.is_empty() || r.local_steps.contains(&0) {
            return Err(Error::Config("local_steps must be a nonempty list of positive integers".into()));
        }
        Ok(())
    }

    /// Output directory with the root variable applied to relative paths.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.output.dir, std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
    }
}

pub(crate) fn resolve_output(dir: &Path, root: Option<PathBuf>) -> PathBuf {
    match root {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Sets `section.key` (any depth) to `value`, parsed as a TOML value when
/// possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("path is nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {key:?} crosses a non-table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
