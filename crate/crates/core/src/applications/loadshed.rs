//! Zone-decomposed load shedding: each zone minimizes the squared
//! power-balance deviations `sum_i (a_i^T z + d_i)^2` of its buses, subject
//! to box bounds on the shedding decisions.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::applications::logistic::ValueAndGradient;
use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{axpy, dot};
use crate::mechanism::{PerturbationMode, SensitivityRecord};
use crate::problem::{ConsensusProblem, ConstraintSet, LocalObjective, SmoothnessDescriptor};

/// Balance rows of one zone: coefficient vectors `a_i` with entries in
/// `[-1, 1]` and demands `d_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadShedZone {
    pub rows: Vec<Vec<f64>>,
    pub demands: Vec<f64>,
}

impl LoadShedZone {
    pub fn new(rows: Vec<Vec<f64>>, demands: Vec<f64>) -> Result<Self> {
        if rows.len() != demands.len() {
            return Err(dim_mismatch("demands", rows.len(), demands.len()));
        }
        if let Some(first) = rows.first() {
            if let Some(r) = rows.iter().find(|r| r.len() != first.len()) {
                return Err(dim_mismatch("coefficient row", first.len(), r.len()));
            }
        }
        if rows.iter().flatten().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::Input("coefficients must lie in [-1, 1]".into()));
        }
        Ok(Self { rows, demands })
    }

    /// `L = 2 sum_i ||a_i||^2`, which dominates `2 lambda_max(A^T A)`.
    pub fn lipschitz(&self) -> f64 {
        (2.0 * self.rows.iter().map(|a| dot(a, a)).sum::<f64>()).max(f64::MIN_POSITIVE)
    }
}

/// `sum_i (a_i^T z + d_i)^2` and `sum_i 2 a_i (a_i^T z + d_i)`.
pub fn loadshed_value_and_gradient(zone: &LoadShedZone, z: &[f64]) -> ValueAndGradient {
    let mut value = 0.0;
    let mut gradient = vec![0.0; z.len()];
    for (a, d) in zone.rows.iter().zip(&zone.demands) {
        let r = dot(a, z) + d;
        value += r * r;
        axpy(2.0 * r, a, &mut gradient);
    }
    ValueAndGradient { value, gradient }
}

/// Worst case over `beta`-adjacent demand vectors: `2 beta` for the
/// subgradient, `beta` for the released decision.
pub fn loadshed_sensitivity(beta: f64, mode: PerturbationMode) -> Result<SensitivityRecord> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("adjacency level must be positive, got {beta}")));
    }
    match mode {
        PerturbationMode::Objective => SensitivityRecord::uniform(2.0 * beta),
        PerturbationMode::Output => SensitivityRecord::uniform(beta),
    }
}

#[derive(Debug, Clone)]
pub struct LoadShedObjective {
    zone: Arc<LoadShedZone>,
}

impl LoadShedObjective {
    pub fn new(zone: Arc<LoadShedZone>) -> Self {
        Self { zone }
    }
}

impl LocalObjective for LoadShedObjective {
    fn value(&self, z: &[f64]) -> f64 {
        loadshed_value_and_gradient(&self.zone, z).value
    }

    fn subgradient(&self, z: &[f64]) -> Vec<f64> {
        loadshed_value_and_gradient(&self.zone, z).gradient
    }

    fn smoothness(&self) -> SmoothnessDescriptor {
        SmoothnessDescriptor::Smooth {
            lipschitz: self.zone.lipschitz(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadShedSpec {
    pub zones: usize,
    pub rows_per_zone: usize,
    pub dimension: usize,
    /// Box half-width on the decisions.
    pub bound: f64,
    /// Standard deviation of the demand perturbation around a feasible plan.
    pub demand_noise: f64,
}

impl Default for LoadShedSpec {
    fn default() -> Self {
        Self {
            zones: 3,
            rows_per_zone: 4,
            dimension: 6,
            bound: 1.0,
            demand_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadShedInstance {
    pub zones: Vec<LoadShedZone>,
    /// Plan inside the box that balances the noiseless demands.
    pub planted: Vec<f64>,
    pub problem: ConsensusProblem,
}

/// Coefficients uniform in `[-1, 1]`; demands `-a_i^T z0 + noise` for a
/// planted `z0` in the inner half of the box.
pub fn make_loadshed(spec: &LoadShedSpec, seed: u64) -> Result<LoadShedInstance> {
    if spec.zones == 0 || spec.rows_per_zone == 0 || spec.dimension == 0 {
        return Err(Error::Input(format!("invalid load-shedding sizes: {spec:?}")));
    }
    if !(spec.bound > 0.0) || !(spec.demand_noise >= 0.0) {
        return Err(Error::Input(format!("invalid load-shedding parameters: {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.dimension;
    let planted: Vec<f64> = (0..n)
        .map(|_| rng.random_range(-0.5..=0.5) * spec.bound)
        .collect();
    let noise = Normal::new(0.0, spec.demand_noise).map_err(|e| Error::Input(e.to_string()))?;
    let mut zones = Vec::with_capacity(spec.zones);
    for _ in 0..spec.zones {
        let rows: Vec<Vec<f64>> = (0..spec.rows_per_zone)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let demands = rows
            .iter()
            .map(|a| -dot(a, &planted) + noise.sample(&mut rng))
            .collect();
        zones.push(LoadShedZone::new(rows, demands)?);
    }
    let problem = loadshed_problem(&zones, spec.bound)?;
    Ok(LoadShedInstance {
        zones,
        planted,
        problem,
    })
}

pub fn loadshed_problem(zones: &[LoadShedZone], bound: f64) -> Result<ConsensusProblem> {
    let n = zones
        .iter()
        .find_map(|z| z.rows.first().map(Vec::len))
        .ok_or_else(|| Error::Input("zones have no balance rows".into()))?;
    let objectives: Vec<Arc<dyn LocalObjective>> = zones
        .iter()
        .map(|z| Arc::new(LoadShedObjective::new(Arc::new(z.clone()))) as Arc<dyn LocalObjective>)
        .collect();
    let sets = vec![ConstraintSet::symmetric_box(n, bound)?; zones.len()];
    ConsensusProblem::new(n, objectives, sets, vec![0.0; n])
}

/// Centralized optimum over `[-u, u]^n` by accelerated projected gradient.
pub fn loadshed_reference(zones: &[LoadShedZone], bound: f64, iterations: usize) -> (Vec<f64>, f64) {
    let n = zones
        .iter()
        .find_map(|z| z.rows.first().map(Vec::len))
        .unwrap_or(0);
    let lipschitz: f64 = zones.iter().map(LoadShedZone::lipschitz).sum();
    let grad = |z: &[f64]| {
        let mut g = vec![0.0; n];
        for zone in zones {
            axpy(1.0, &loadshed_value_and_gradient(zone, z).gradient, &mut g);
        }
        g
    };
    let project = |v: Vec<f64>| -> Vec<f64> { v.into_iter().map(|x| x.clamp(-bound, bound)).collect() };
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iterations {
        let g = grad(&y);
        let next = project(y.iter().zip(&g).map(|(a, b)| a - b / lipschitz).collect());
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = next
            .iter()
            .zip(&x)
            .map(|(a, b)| a + (t - 1.0) / t_next * (a - b))
            .collect();
        x = next;
        t = t_next;
    }
    let value = zones
        .iter()
        .map(|zone| loadshed_value_and_gradient(zone, &x).value)
        .sum();
    (x, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_examples() {
        let zone = LoadShedZone::new(vec![vec![1.0]], vec![-1.0]).unwrap();
        assert_eq!(loadshed_value_and_gradient(&zone, &[1.0]).value, 0.0);
        let vg = loadshed_value_and_gradient(&zone, &[0.0]);
        assert_eq!((vg.value, vg.gradient), (1.0, vec![-2.0]));
    }

    #[test]
    fn sensitivity_examples() {
        let obj = loadshed_sensitivity(0.01, PerturbationMode::Objective).unwrap();
        let out = loadshed_sensitivity(0.01, PerturbationMode::Output).unwrap();
        assert_eq!((obj.l1, obj.l2), (0.02, 0.02));
        assert_eq!((out.l1, out.l2), (0.01, 0.01));
        assert!(loadshed_sensitivity(0.0, PerturbationMode::Output).is_err());
    }

    #[test]
    fn generator_respects_coefficient_range() {
        let inst = make_loadshed(&LoadShedSpec::default(), 9).unwrap();
        assert!(inst
            .zones
            .iter()
            .flat_map(|z| z.rows.iter().flatten())
            .all(|a| (-1.0..=1.0).contains(a)));
        assert!(LoadShedZone::new(vec![vec![1.5]], vec![0.0]).is_err());
    }

    #[test]
    fn reference_solution_is_stationary() {
        let spec = LoadShedSpec {
            demand_noise: 0.0,
            ..LoadShedSpec::default()
        };
        let inst = make_loadshed(&spec, 4).unwrap();
        let (_, value) = loadshed_reference(&inst.zones, spec.bound, 5000);
        assert!(value < 1e-8, "planted plan balances exactly, got {value}");
    }
}
