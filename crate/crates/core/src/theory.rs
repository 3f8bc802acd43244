//! Constants and right-hand sides of the expected-suboptimality bounds, and
//! checks of the schedule and dual-boundedness assumptions behind them.
//!
//! All three bounds control
//! `E[F(z^(T)) - F(z*) + gamma ||A w^(T) - z^(T)||]`
//! for the regime's averaged iterates (see [`crate::engine::Averages`]).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{rho_schedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::mechanism::{MechanismConfig, MechanismKind, SensitivityQuery, SensitivityRecord, SensitivitySource};
use crate::problem::{ConsensusProblem, ConstraintSet, Regime, SmoothnessDescriptor};

/// Constants appearing in the bounds. `None` marks a constant that is not
/// known; bounds that need it report it by name.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TheoryConstants {
    /// `max ||f_p'(u)||` over `W_p`.
    pub u1: Option<f64>,
    /// `max ||u - v||` over `W_p`.
    pub u2: Option<f64>,
    /// `2 Delta_1^2` (Laplace) or `2 ln(1.25/delta) Delta_2^2` (Gaussian).
    pub u3: Option<f64>,
    pub gamma: Option<f64>,
    pub lipschitz: Option<f64>,
    pub modulus: Option<f64>,
    pub rho_first: Option<f64>,
    pub rho_max: Option<f64>,
    pub lambda_first_norm: f64,
    pub dimension: usize,
    pub agents: usize,
}

impl TheoryConstants {
    fn need(&self, value: Option<f64>, name: &str) -> Result<f64> {
        value.ok_or_else(|| Error::Constants(format!("bound needs {name}, which is not set")))
    }
}

/// How to obtain `U1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubgradientBound {
    /// A known analytic bound.
    Analytic(f64),
    /// Maximum over box vertices (for `n <= 10`) and `samples` uniform
    /// points of the set; a lower estimate of the true maximum.
    Sampled { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantsRequest {
    pub subgradient: SubgradientBound,
    /// Dual bound; typically twice the norm of a reference dual solution.
    pub gamma: Option<f64>,
    pub lambda_first_norm: f64,
    /// Horizon over which `rho_max` is taken.
    pub rounds: usize,
    /// Overrides the sensitivity used for `U3`; required to be exact when
    /// the mechanism's source is iterate-dependent.
    pub sensitivity: Option<SensitivityRecord>,
}

/// `U3` for a mechanism with the given worst-case sensitivity.
pub fn noise_constant(mechanism: &MechanismConfig, sensitivity: &SensitivityRecord) -> f64 {
    if !mechanism.is_private() {
        return 0.0;
    }
    match mechanism.kind {
        MechanismKind::Laplace => 2.0 * sensitivity.l1 * sensitivity.l1,
        MechanismKind::Gaussian => {
            2.0 * (1.25 / mechanism.delta).ln() * sensitivity.l2 * sensitivity.l2
        }
        MechanismKind::None => 0.0,
    }
}

/// Sample points of a bounded set: vertices of its enclosing box when
/// `n <= 10` and uniform draws, keeping only feasible ones.
fn sample_points(set: &ConstraintSet, samples: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let Some((lower, upper)) = set.enclosing_box() else {
        return Err(Error::Constants(
            "constants need a bounded constraint set".into(),
        ));
    };
    let n = lower.len();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    if n <= 10 {
        for mask in 0u32..(1 << n) {
            pts.push(
                (0..n)
                    .map(|i| if mask & (1 << i) != 0 { upper[i] } else { lower[i] })
                    .collect(),
            );
        }
    }
    for _ in 0..samples {
        pts.push(
            (0..n)
                .map(|i| {
                    if lower[i] == upper[i] {
                        lower[i]
                    } else {
                        rng.random_range(lower[i]..=upper[i])
                    }
                })
                .collect(),
        );
    }
    pts.retain(|p| set.violation(p) <= 0.0);
    Ok(pts)
}

pub fn compute_constants(
    problem: &ConsensusProblem,
    mechanism: &MechanismConfig,
    schedule: &ScheduleConfig,
    request: &ConstantsRequest,
) -> Result<TheoryConstants> {
    let agents = problem.agent_count();
    let mut u2: f64 = 0.0;
    for p in 0..agents {
        let d = problem.constraint_set(p).diameter().ok_or_else(|| {
            Error::Constants(format!("constraint set of agent {p} is unbounded"))
        })?;
        u2 = u2.max(d);
    }

    let (samples, seed) = match request.subgradient {
        SubgradientBound::Sampled { samples, seed } => (samples, seed),
        SubgradientBound::Analytic(_) => (64, 0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<Vec<Vec<f64>>> = Vec::with_capacity(agents);
    for p in 0..agents {
        points.push(sample_points(problem.constraint_set(p), samples, &mut rng)?);
    }

    let u1 = match request.subgradient {
        SubgradientBound::Analytic(v) => v,
        SubgradientBound::Sampled { .. } => {
            let mut best: f64 = 0.0;
            for (p, pts) in points.iter().enumerate() {
                for x in pts {
                    best = best.max(norm2(&problem.objective(p).subgradient(x)));
                }
            }
            best
        }
    };

    let rho_first = rho_schedule(schedule, 1);
    let rho_max = (1..=request.rounds.max(1))
        .map(|t| rho_schedule(schedule, t))
        .fold(0.0, f64::max);

    let sensitivity = match (&request.sensitivity, &mechanism.sensitivity) {
        (Some(s), _) => *s,
        (None, SensitivitySource::Constant(s)) => *s,
        (None, SensitivitySource::Dynamic(_)) => {
            let mut l1: f64 = 0.0;
            let mut l2: f64 = 0.0;
            for (p, pts) in points.iter().enumerate() {
                for x in pts {
                    let r = mechanism.sensitivity.evaluate(&SensitivityQuery {
                        round: 1,
                        local_step: 1,
                        agent: p,
                        iterate: x,
                        eta: 1.0,
                        rho: rho_first,
                    });
                    l1 = l1.max(r.l1);
                    l2 = l2.max(r.l2);
                }
            }
            SensitivityRecord { l1, l2 }
        }
    };

    let descriptor = crate::engine::common_smoothness(problem);
    let (lipschitz, modulus) = match descriptor {
        SmoothnessDescriptor::Smooth { lipschitz } => (Some(lipschitz), None),
        SmoothnessDescriptor::StronglyConvex { modulus } => (None, Some(modulus)),
        SmoothnessDescriptor::Nonsmooth => (None, None),
    };

    Ok(TheoryConstants {
        u1: Some(u1),
        u2: Some(u2),
        u3: Some(noise_constant(mechanism, &sensitivity)),
        gamma: request.gamma,
        lipschitz,
        modulus,
        rho_first: Some(rho_first),
        rho_max: Some(rho_max),
        lambda_first_norm: request.lambda_first_norm,
        dimension: problem.dimension(),
        agents,
    })
}

/// Right-hand side of the bound for `regime` after `T` rounds of `E` local
/// steps at per-step budget `epsilon` (`INFINITY` for non-private runs).
pub fn evaluate_bound(
    c: &TheoryConstants,
    regime: Regime,
    rounds: usize,
    local_steps: usize,
    epsilon: f64,
) -> Result<f64> {
    if rounds == 0 || local_steps == 0 {
        return Err(Error::Parameter("T and E must be at least 1".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("budget must be positive, got {epsilon}")));
    }
    let t = rounds as f64;
    let e = local_steps as f64;
    let n = c.dimension as f64;
    let p = c.agents as f64;
    let u2 = c.need(c.u2, "U2")?;
    let u3 = c.need(c.u3, "U3")?;
    let gamma = c.need(c.gamma, "gamma")?;
    let rho1 = c.need(c.rho_first, "rho^1")?;
    let rho_max = c.need(c.rho_max, "rho^max")?;
    let lam = c.lambda_first_norm;
    // u3 / eps^k, taken as zero in the non-private limit.
    let private = |k: i32| {
        if epsilon.is_finite() {
            u3 / epsilon.powi(k)
        } else {
            0.0
        }
    };
    match regime {
        Regime::Smooth => {
            let l = c.need(c.lipschitz, "L")?;
            let first = if epsilon.is_finite() {
                (n * p * u3 + u2 * u2 / (2.0 * e)) / (epsilon * t.sqrt())
            } else {
                0.0
            };
            let second =
                (u2 * u2 * (rho_max + l / e) + (gamma + lam).powi(2) / rho1) / (2.0 * t);
            Ok(first + second)
        }
        Regime::Nonsmooth => {
            let u1 = c.need(c.u1, "U1")?;
            let first = (n * p * private(2) + p * u1 * u1 + u2 * u2 / (2.0 * e)) / t.sqrt();
            let second =
                (u2 * u2 * rho_max + (gamma + lam).powi(2) / rho1 + 2.0 * gamma * u2) / (2.0 * t);
            Ok(first + second)
        }
        Regime::StronglyConvex => {
            let u1 = c.need(c.u1, "U1")?;
            let alpha = c.need(c.modulus, "alpha")?;
            let inner = 2.0 * u2 * gamma
                + u2 * u2 * rho_max
                + 4.0 * gamma * gamma / rho1
                + alpha * u2 * u2 / (2.0 * e)
                + 2.0 * p * (u1 * u1 + n * private(2)) / alpha;
            Ok(inner / (t + 1.0))
        }
    }
}

/// Which assumptions held on an observed run. Violations are flagged, never
/// fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub rho_nondecreasing: bool,
    pub rho_bounded: bool,
    /// `rho^t <= t/(t-1) rho^{t-1}`
    pub rho_growth: bool,
    /// `||lambda^t|| <= gamma` for every observed `t`.
    pub dual_bounded: bool,
    pub max_dual_norm: f64,
    pub flags: Vec<String>,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.flags.is_empty()
    }
}

/// `rhos[i]` is `rho^{i+1}`; `dual_norms[i]` is the stacked `||lambda||`
/// after round `i + 1`.
pub fn check_assumptions(
    rhos: &[f64],
    dual_norms: &[f64],
    constants: &TheoryConstants,
) -> AssumptionReport {
    let mut flags = Vec::new();
    let rho_nondecreasing = rhos.windows(2).all(|w| w[1] >= w[0]);
    if !rho_nondecreasing {
        flags.push("rho decreases at some round".to_string());
    }
    let rho_bounded = match constants.rho_max {
        Some(m) => rhos.iter().all(|r| *r <= m),
        None => rhos.iter().all(|r| r.is_finite()),
    };
    if !rho_bounded {
        flags.push("rho exceeds rho^max".to_string());
    }
    let rho_growth = rhos.windows(2).enumerate().all(|(i, w)| {
        let t = (i + 2) as f64;
        w[1] <= t / (t - 1.0) * w[0] * (1.0 + 1e-12)
    });
    if !rho_growth {
        flags.push("rho^t exceeds t/(t-1) rho^{t-1}".to_string());
    }
    let max_dual_norm = dual_norms.iter().copied().fold(0.0, f64::max);
    let dual_bounded = match constants.gamma {
        Some(g) => max_dual_norm <= g,
        None => true,
    };
    if !dual_bounded {
        flags.push(format!(
            "dual norm {max_dual_norm:.6e} exceeds gamma {:.6e}",
            constants.gamma.unwrap_or(f64::NAN)
        ));
    }
    AssumptionReport {
        rho_nondecreasing,
        rho_bounded,
        rho_growth,
        dual_bounded,
        max_dual_norm,
        flags,
    }
}

/// `2 ||lambda||` from a long non-private run, as a default for `gamma`.
pub fn reference_gamma(
    problem: &ConsensusProblem,
    schedule: &ScheduleConfig,
    rounds: usize,
) -> Result<f64> {
    let s = ScheduleConfig {
        epsilon: f64::INFINITY,
        ..*schedule
    };
    let cfg = crate::engine::RunConfig::new(rounds, 1, 0);
    let out = crate::engine::run(problem, &s, &MechanismConfig::none(), &cfg)?;
    Ok(2.0 * crate::linalg::stacked_norm(&out.state.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RhoSchedule;
    use crate::mechanism::PerturbationMode;
    use crate::problem::FnObjective;
    use std::sync::Arc;

    fn smooth_constants() -> TheoryConstants {
        TheoryConstants {
            u1: Some(1.0),
            u2: Some(2.0),
            u3: Some(2.0),
            gamma: Some(1.0),
            lipschitz: Some(1.0),
            modulus: Some(1.0),
            rho_first: Some(1.0),
            rho_max: Some(1.0),
            lambda_first_norm: 0.0,
            dimension: 1,
            agents: 1,
        }
    }

    #[test]
    fn smooth_example() {
        let b = evaluate_bound(&smooth_constants(), Regime::Smooth, 100, 1, 1.0).unwrap();
        assert!((b - 0.445).abs() < 1e-12);
    }

    #[test]
    fn non_private_smooth_drops_first_term() {
        let b = evaluate_bound(&smooth_constants(), Regime::Smooth, 100, 1, f64::INFINITY).unwrap();
        assert!((b - 9.0 / 200.0).abs() < 1e-15);
    }

    #[test]
    fn missing_constant_is_named() {
        let c = TheoryConstants {
            gamma: None,
            ..smooth_constants()
        };
        match evaluate_bound(&c, Regime::Nonsmooth, 10, 1, 1.0) {
            Err(Error::Constants(msg)) => assert!(msg.contains("gamma")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bounds_decrease_in_t() {
        for regime in [Regime::Smooth, Regime::Nonsmooth, Regime::StronglyConvex] {
            let a = evaluate_bound(&smooth_constants(), regime, 50, 2, 0.5).unwrap();
            let b = evaluate_bound(&smooth_constants(), regime, 200, 2, 0.5).unwrap();
            assert!(b < a, "{regime}");
        }
    }

    fn boxed_square() -> ConsensusProblem {
        let f = FnObjective::new(
            |z: &[f64]| z[0] * z[0],
            |z: &[f64]| vec![2.0 * z[0]],
            SmoothnessDescriptor::Smooth { lipschitz: 2.0 },
        );
        ConsensusProblem::new(
            1,
            vec![Arc::new(f)],
            vec![ConstraintSet::symmetric_box(1, 1.0).unwrap()],
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn constants_examples() {
        let problem = boxed_square();
        let sens = SensitivitySource::Constant(SensitivityRecord::uniform(0.02).unwrap());
        let mech = MechanismConfig::laplace(0.1, PerturbationMode::Objective, sens).unwrap();
        let schedule = ScheduleConfig {
            rho: RhoSchedule::constant(1.0),
            eta_regime: Regime::Smooth,
            epsilon: 0.1,
        };
        let req = ConstantsRequest {
            subgradient: SubgradientBound::Sampled { samples: 10, seed: 1 },
            gamma: Some(1.0),
            lambda_first_norm: 0.0,
            rounds: 10,
            sensitivity: None,
        };
        let c = compute_constants(&problem, &mech, &schedule, &req).unwrap();
        assert_eq!(c.u1, Some(2.0));
        assert_eq!(c.u2, Some(2.0));
        assert!((c.u3.unwrap() - 8e-4).abs() < 1e-18);

        let cube = ConstraintSet::symmetric_box(4, 1.0).unwrap();
        assert!((cube.diameter().unwrap() - 2.0 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn unbounded_set_is_rejected() {
        let f = FnObjective::new(
            |z: &[f64]| z[0],
            |_: &[f64]| vec![1.0],
            SmoothnessDescriptor::Nonsmooth,
        );
        let problem =
            ConsensusProblem::new(1, vec![Arc::new(f)], vec![ConstraintSet::Unconstrained], vec![0.0])
                .unwrap();
        let schedule = ScheduleConfig {
            rho: RhoSchedule::constant(1.0),
            eta_regime: Regime::Nonsmooth,
            epsilon: 1.0,
        };
        let req = ConstantsRequest {
            subgradient: SubgradientBound::Analytic(1.0),
            gamma: Some(1.0),
            lambda_first_norm: 0.0,
            rounds: 1,
            sensitivity: None,
        };
        assert!(matches!(
            compute_constants(&problem, &MechanismConfig::none(), &schedule, &req),
            Err(Error::Constants(_))
        ));
    }

    #[test]
    fn assumption_examples() {
        let c = TheoryConstants {
            rho_max: Some(1e9),
            gamma: Some(1.0),
            ..smooth_constants()
        };
        let constant = vec![5.0; 20];
        assert!(check_assumptions(&constant, &[0.5; 20], &c).all_hold());

        let schedule = ScheduleConfig {
            rho: RhoSchedule::dynamic(2.0, 5.0, 3),
            eta_regime: Regime::Nonsmooth,
            epsilon: 1.0,
        };
        let rhos: Vec<f64> = (1..=30).map(|t| rho_schedule(&schedule, t)).collect();
        assert!(check_assumptions(&rhos, &[], &c).rho_nondecreasing);

        let r = check_assumptions(&constant, &[0.5, 1.5], &c);
        assert!(!r.dual_bounded && !r.all_hold());
        assert_eq!(r.max_dual_norm, 1.5);
    }
}
