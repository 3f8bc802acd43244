//! Consensus problems with analytic optima: `f_p(z) = ||z - c_p||^2` and
//! `f_p(z) = ||z - c_p||_1`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mean;
use crate::problem::{ConsensusProblem, ConstraintSet, FnObjective, LocalObjective, SmoothnessDescriptor};

/// `||z - c||^2`; `2`-smooth and `2`-strongly convex, labelled by `descriptor`.
pub fn squared_distance(center: Vec<f64>, descriptor: SmoothnessDescriptor) -> FnObjective {
    let c2 = center.clone();
    FnObjective::new(
        move |z: &[f64]| z.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum(),
        move |z: &[f64]| z.iter().zip(&c2).map(|(a, b)| 2.0 * (a - b)).collect(),
        descriptor,
    )
}

/// `||z - c||_1` with subgradient `sign(z - c)` (zero at kinks).
pub fn absolute_distance(center: Vec<f64>) -> FnObjective {
    let c2 = center.clone();
    FnObjective::new(
        move |z: &[f64]| z.iter().zip(&center).map(|(a, b)| (a - b).abs()).sum(),
        move |z: &[f64]| {
            z.iter()
                .zip(&c2)
                .map(|(a, b)| {
                    let d: f64 = a - b;
                    if d == 0.0 { 0.0 } else { d.signum() }
                })
                .collect()
        },
        SmoothnessDescriptor::Nonsmooth,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConsensusLoss {
    /// Squared distance, declared smooth with `L = 2`.
    Squared,
    /// Squared distance, declared strongly convex with `alpha = 2`.
    SquaredStrong,
    /// L1 distance, nonsmooth.
    Absolute,
}

#[derive(Debug, Clone)]
pub struct ConsensusInstance {
    pub centers: Vec<Vec<f64>>,
    pub loss: ConsensusLoss,
    /// Common box `[-u, u]^n`, if any.
    pub bound: Option<f64>,
    pub problem: ConsensusProblem,
    pub optimum: Vec<f64>,
    pub optimal_value: f64,
}

/// Builds the problem for the given centers; every agent shares the same
/// constraint set.
pub fn consensus_problem(
    centers: Vec<Vec<f64>>,
    loss: ConsensusLoss,
    bound: Option<f64>,
) -> Result<ConsensusInstance> {
    let n = centers.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Input("need at least one nonempty center".into()));
    }
    let set = match bound {
        Some(u) => ConstraintSet::symmetric_box(n, u)?,
        None => ConstraintSet::Unconstrained,
    };
    let objectives: Vec<Arc<dyn LocalObjective>> = centers
        .iter()
        .map(|c| {
            let f: Arc<dyn LocalObjective> = match loss {
                ConsensusLoss::Squared => Arc::new(squared_distance(
                    c.clone(),
                    SmoothnessDescriptor::Smooth { lipschitz: 2.0 },
                )),
                ConsensusLoss::SquaredStrong => Arc::new(squared_distance(
                    c.clone(),
                    SmoothnessDescriptor::StronglyConvex { modulus: 2.0 },
                )),
                ConsensusLoss::Absolute => Arc::new(absolute_distance(c.clone())),
            };
            f
        })
        .collect();
    let problem = ConsensusProblem::new(
        n,
        objectives,
        vec![set; centers.len()],
        vec![0.0; n],
    )?;
    let optimum = consensus_optimum(&centers, loss, bound);
    let optimal_value = (0..problem.agent_count())
        .map(|p| problem.objective(p).value(&optimum))
        .sum();
    Ok(ConsensusInstance {
        centers,
        loss,
        bound,
        problem,
        optimum,
        optimal_value,
    })
}

/// Coordinatewise mean (squared loss) or median (L1 loss), clipped to the
/// box. Both losses are separable, so clipping the one-dimensional
/// minimizer is exact.
pub fn consensus_optimum(centers: &[Vec<f64>], loss: ConsensusLoss, bound: Option<f64>) -> Vec<f64> {
    let raw = match loss {
        ConsensusLoss::Squared | ConsensusLoss::SquaredStrong => mean(centers),
        ConsensusLoss::Absolute => {
            let n = centers[0].len();
            (0..n)
                .map(|i| {
                    let mut col: Vec<f64> = centers.iter().map(|c| c[i]).collect();
                    col.sort_by(|a, b| a.total_cmp(b));
                    let m = col.len();
                    if m % 2 == 1 {
                        col[m / 2]
                    } else {
                        0.5 * (col[m / 2 - 1] + col[m / 2])
                    }
                })
                .collect()
        }
    };
    match bound {
        Some(u) => raw.into_iter().map(|x| x.clamp(-u, u)).collect(),
        None => raw,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSpec {
    pub agents: usize,
    pub dimension: usize,
    pub loss: ConsensusLoss,
    pub bound: Option<f64>,
    /// Centers are drawn uniformly from `[-spread, spread]^n`.
    pub spread: f64,
}

impl Default for ConsensusSpec {
    fn default() -> Self {
        Self {
            agents: 3,
            dimension: 5,
            loss: ConsensusLoss::Squared,
            bound: None,
            spread: 1.0,
        }
    }
}

pub fn make_consensus(spec: &ConsensusSpec, seed: u64) -> Result<ConsensusInstance> {
    if spec.agents == 0 || spec.dimension == 0 || !(spec.spread > 0.0) {
        return Err(Error::Input(format!("invalid consensus sizes: {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = (0..spec.agents)
        .map(|_| {
            (0..spec.dimension)
                .map(|_| rng.random_range(-spec.spread..=spec.spread))
                .collect()
        })
        .collect();
    consensus_problem(centers, spec.loss, spec.bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimum_examples() {
        let centers = vec![vec![0.0, 3.0], vec![1.0, -1.0], vec![5.0, 0.0]];
        assert_eq!(
            consensus_optimum(&centers, ConsensusLoss::Squared, None),
            vec![2.0, 2.0 / 3.0]
        );
        assert_eq!(
            consensus_optimum(&centers, ConsensusLoss::Absolute, None),
            vec![1.0, 0.0]
        );
        assert_eq!(
            consensus_optimum(&centers, ConsensusLoss::Squared, Some(1.0)),
            vec![1.0, 2.0 / 3.0]
        );
    }

    #[test]
    fn optimal_value_is_minimal_on_a_grid() {
        let inst = consensus_problem(
            vec![vec![0.2], vec![-0.7], vec![0.9]],
            ConsensusLoss::Absolute,
            Some(0.5),
        )
        .unwrap();
        let f = |x: f64| -> f64 { inst.centers.iter().map(|c| (x - c[0]).abs()).sum() };
        let grid_min = (0..=1000)
            .map(|k| f(-0.5 + k as f64 / 1000.0))
            .fold(f64::INFINITY, f64::min);
        assert!((grid_min - inst.optimal_value).abs() < 1e-12);
    }
}
