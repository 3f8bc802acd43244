//! Laplace and Gaussian noise calibrated to subgradient sensitivity, the
//! output-perturbation baseline, and noise-magnitude metrics.
//!
//! Under objective perturbation the noise vector enters the proximal
//! subproblem as an affine term, so the sensitivity that calibrates it is the
//! worst-case change of the local subgradient between neighboring datasets.
//! Under output perturbation the noise is added to the solved iterate and
//! the sensitivity is that of the iterate itself.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Laplace,
    Gaussian,
    None,
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MechanismKind::Laplace => "laplace",
            MechanismKind::Gaussian => "gaussian",
            MechanismKind::None => "none",
        })
    }
}

/// Where the noise is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationMode {
    /// Noisy affine term inside the subproblem; the released point stays feasible.
    Objective,
    /// Noise added to the solved subproblem; the released point may leave `W_p`.
    Output,
}

impl fmt::Display for PerturbationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PerturbationMode::Objective => "objective",
            PerturbationMode::Output => "output",
        })
    }
}

/// L1 and L2 sensitivities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub l1: f64,
    pub l2: f64,
}

impl SensitivityRecord {
    pub fn new(l1: f64, l2: f64) -> Result<Self> {
        if !(l1 >= 0.0 && l2 >= 0.0) || !l1.is_finite() || !l2.is_finite() {
            return Err(Error::Parameter(format!(
                "sensitivities must be finite and nonnegative (l1 = {l1}, l2 = {l2})"
            )));
        }
        if l2 > l1 * (1.0 + 1e-12) {
            return Err(Error::Parameter(format!(
                "L2 sensitivity {l2} exceeds L1 sensitivity {l1}"
            )));
        }
        Ok(Self { l1, l2 })
    }

    /// Same bound in both norms, as for scalar-valued differences.
    pub fn uniform(value: f64) -> Result<Self> {
        Self::new(value, value)
    }

    /// From an L2 bound in `R^n`, with `l1 = sqrt(n) * l2`.
    pub fn from_l2_bound(l2: f64, n: usize) -> Result<Self> {
        Self::new(l2 * (n as f64).sqrt(), l2)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            l1: self.l1 * factor,
            l2: self.l2 * factor,
        }
    }
}

/// Context handed to a sensitivity oracle for one local update.
#[derive(Debug, Clone, Copy)]
pub struct SensitivityQuery<'a> {
    pub round: usize,
    pub local_step: usize,
    pub agent: usize,
    /// Current inner iterate `z_p^{t,e}`.
    pub iterate: &'a [f64],
    pub eta: f64,
    pub rho: f64,
}

pub type SensitivityFn = dyn Fn(&SensitivityQuery<'_>) -> SensitivityRecord + Send + Sync;

#[derive(Clone)]
pub enum SensitivitySource {
    /// A worst-case bound valid for every round, step and agent.
    Constant(SensitivityRecord),
    /// Iterate-dependent bound evaluated per `(t, e, p)`.
    Dynamic(Arc<SensitivityFn>),
}

impl SensitivitySource {
    pub fn dynamic<F>(f: F) -> Self
    where
        F: Fn(&SensitivityQuery<'_>) -> SensitivityRecord + Send + Sync + 'static,
    {
        Self::Dynamic(Arc::new(f))
    }

    pub fn evaluate(&self, query: &SensitivityQuery<'_>) -> SensitivityRecord {
        match self {
            Self::Constant(r) => *r,
            Self::Dynamic(f) => f(query),
        }
    }
}

impl fmt::Debug for SensitivitySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(r) => f.debug_tuple("Constant").field(r).finish(),
            Self::Dynamic(_) => f.write_str("Dynamic(..)"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MechanismConfig {
    pub kind: MechanismKind,
    /// Per-step privacy budget; `f64::INFINITY` disables noise.
    pub epsilon: f64,
    pub delta: f64,
    pub mode: PerturbationMode,
    pub sensitivity: SensitivitySource,
}

impl MechanismConfig {
    /// No noise at all.
    pub fn none() -> Self {
        Self {
            kind: MechanismKind::None,
            epsilon: f64::INFINITY,
            delta: 0.0,
            mode: PerturbationMode::Objective,
            sensitivity: SensitivitySource::Constant(SensitivityRecord { l1: 0.0, l2: 0.0 }),
        }
    }

    pub fn laplace(
        epsilon: f64,
        mode: PerturbationMode,
        sensitivity: SensitivitySource,
    ) -> Result<Self> {
        Self::new(MechanismKind::Laplace, epsilon, 0.0, mode, sensitivity)
    }

    pub fn gaussian(
        epsilon: f64,
        delta: f64,
        mode: PerturbationMode,
        sensitivity: SensitivitySource,
    ) -> Result<Self> {
        Self::new(MechanismKind::Gaussian, epsilon, delta, mode, sensitivity)
    }

    /// Validates the invariants: positive budget, Gaussian needs
    /// `delta in (0, 1)`, Laplace is pure (`delta = 0`).
    pub fn new(
        kind: MechanismKind,
        epsilon: f64,
        delta: f64,
        mode: PerturbationMode,
        sensitivity: SensitivitySource,
    ) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "privacy budget must be positive, got {epsilon}"
            )));
        }
        let delta = match kind {
            MechanismKind::Gaussian => {
                if !(delta > 0.0 && delta < 1.0) {
                    return Err(Error::Config(format!(
                        "Gaussian mechanism requires delta in (0, 1), got {delta}"
                    )));
                }
                if epsilon > 1.0 && epsilon.is_finite() {
                    log::warn!(
                        "Gaussian calibration is only proven for epsilon <= 1 (got {epsilon})"
                    );
                }
                delta
            }
            MechanismKind::Laplace | MechanismKind::None => 0.0,
        };
        Ok(Self {
            kind,
            epsilon,
            delta,
            mode,
            sensitivity,
        })
    }

    /// True when noise is actually drawn.
    pub fn is_private(&self) -> bool {
        self.kind != MechanismKind::None && self.epsilon.is_finite()
    }
}

/// Per-coordinate noise scale and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParameters {
    /// Laplace scale `b` or Gaussian standard deviation `sigma`.
    pub scale_or_sigma: f64,
    pub variance: f64,
}

/// Laplace: `b = Delta_1 / eps`, variance `2 b^2`.
/// Gaussian: `sigma^2 = 2 ln(1.25/delta) (Delta_2 / eps)^2`.
pub fn noise_parameters(
    config: &MechanismConfig,
    sensitivity: &SensitivityRecord,
) -> Result<NoiseParameters> {
    if config.kind == MechanismKind::None {
        return Ok(NoiseParameters {
            scale_or_sigma: 0.0,
            variance: 0.0,
        });
    }
    if !(config.epsilon > 0.0 && config.epsilon.is_finite()) {
        return Err(Error::Parameter(format!(
            "noise calibration needs a finite positive budget, got {}",
            config.epsilon
        )));
    }
    match config.kind {
        MechanismKind::Laplace => {
            let b = sensitivity.l1 / config.epsilon;
            Ok(NoiseParameters {
                scale_or_sigma: b,
                variance: 2.0 * b * b,
            })
        }
        MechanismKind::Gaussian => {
            if !(config.delta > 0.0 && config.delta < 1.0) {
                return Err(Error::Config(format!(
                    "Gaussian mechanism requires delta in (0, 1), got {}",
                    config.delta
                )));
            }
            let ratio = sensitivity.l2 / config.epsilon;
            let variance = 2.0 * (1.25 / config.delta).ln() * ratio * ratio;
            Ok(NoiseParameters {
                scale_or_sigma: variance.sqrt(),
                variance,
            })
        }
        MechanismKind::None => unreachable!(),
    }
}

/// One Laplace(0, b) draw by inverse CDF from a uniform on (-1/2, 1/2).
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u = loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        if u > -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `n` IID zero-mean draws from the configured mechanism; the zero vector
/// when the mechanism is disabled.
pub fn sample_noise<R: Rng + ?Sized>(
    config: &MechanismConfig,
    sensitivity: &SensitivityRecord,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !config.is_private() {
        return Ok(vec![0.0; n]);
    }
    let params = noise_parameters(config, sensitivity)?;
    let out = match config.kind {
        MechanismKind::Laplace => (0..n)
            .map(|_| sample_laplace(params.scale_or_sigma, rng))
            .collect(),
        MechanismKind::Gaussian => (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                params.scale_or_sigma * z
            })
            .collect(),
        MechanismKind::None => vec![0.0; n],
    };
    Ok(out)
}

/// Baseline release `z + xi`. No projection back onto the feasible set.
pub fn perturb_output<R: Rng + ?Sized>(
    true_iterate: &[f64],
    config: &MechanismConfig,
    sensitivity: &SensitivityRecord,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let xi = sample_noise(config, sensitivity, true_iterate.len(), rng)?;
    Ok(add_noise(true_iterate, &xi))
}

pub fn add_noise(z: &[f64], xi: &[f64]) -> Vec<f64> {
    z.iter().zip(xi).map(|(a, b)| a + b).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseNormalization {
    /// `sum_p sum_e sum_i |xi_{pi}^{t,e}|`
    #[default]
    Total,
    /// Each `(p, e)` term averaged over the `n` coordinates first.
    PerCoordinateMean,
}

/// Magnitude of all noise drawn in one round, one vector per `(p, e)`.
pub fn noise_magnitude(draws: &[Vec<f64>], normalization: NoiseNormalization) -> f64 {
    draws
        .iter()
        .map(|xi| {
            let s: f64 = xi.iter().map(|x| x.abs()).sum();
            match normalization {
                NoiseNormalization::Total => s,
                NoiseNormalization::PerCoordinateMean if xi.is_empty() => 0.0,
                NoiseNormalization::PerCoordinateMean => s / xi.len() as f64,
            }
        })
        .sum()
}

/// Largest absolute log-ratio of binned frequencies of two output samples.
/// Bin edges are quantiles of the pooled sample so that every bin is
/// populated; bins empty in either sample are skipped.
pub fn binned_log_ratio(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.total_cmp(y));
    let edges: Vec<f64> = (1..bins)
        .map(|k| pooled[k * pooled.len() / bins])
        .collect();
    let histogram = |sample: &[f64]| {
        let mut counts = vec![0usize; bins];
        for &x in sample {
            counts[edges.partition_point(|&e| e <= x)] += 1;
        }
        counts
    };
    let ca = histogram(a);
    let cb = histogram(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    ca.iter()
        .zip(&cb)
        .filter(|(x, y)| **x > 0 && **y > 0)
        .map(|(&x, &y)| ((x as f64 / na) / (y as f64 / nb)).ln().abs())
        .fold(0.0, f64::max)
}
