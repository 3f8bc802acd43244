//! Soft-plus penalty solver for the perturbed proximal subproblem under
//! smooth convex inequalities.
//!
//! The constrained subproblem `min_{z in W} G(z)` is replaced by the
//! unconstrained, strongly convex problem
//!
//! ```text
//! min_z  G(z) + g_l(z),    g_l(z) = sum_m ln(1 + exp(l * h_m(z)))
//! ```
//!
//! whose minimizer tends to the constrained one as the sharpness `l` grows.
//! [`constrained_solve`] follows that limit with a warm-started geometric
//! schedule in `l`; each stage is a damped Newton solve.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{dist2, dot, norm2};
use crate::problem::{InequalityConstraint, InequalitySet};

/// The perturbed, linearized proximal objective
///
/// ```text
/// G(z) = <f', z> + ||z - c||^2 / (2 eta) + (rho/2) ||w - z + (lambda - xi)/rho||^2
/// ```
///
/// with `f'` the subgradient at the current inner iterate `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxObjective {
    pub subgradient: Vec<f64>,
    pub center: Vec<f64>,
    pub global: Vec<f64>,
    pub dual: Vec<f64>,
    pub noise: Vec<f64>,
    pub eta: f64,
    pub rho: f64,
}

impl ProxObjective {
    pub fn new(
        subgradient: Vec<f64>,
        center: Vec<f64>,
        global: Vec<f64>,
        dual: Vec<f64>,
        noise: Vec<f64>,
        eta: f64,
        rho: f64,
    ) -> Result<Self> {
        let n = subgradient.len();
        for (what, v) in [
            ("inner iterate", &center),
            ("global iterate", &global),
            ("dual", &dual),
            ("noise", &noise),
        ] {
            if v.len() != n {
                return Err(dim_mismatch(what, n, v.len()));
            }
        }
        if !(eta > 0.0) || !(rho > 0.0) {
            return Err(Error::Parameter(format!(
                "eta and rho must be positive (eta = {eta}, rho = {rho})"
            )));
        }
        Ok(Self {
            subgradient,
            center,
            global,
            dual,
            noise,
            eta,
            rho,
        })
    }

    pub fn dimension(&self) -> usize {
        self.subgradient.len()
    }

    /// Strong convexity modulus `1/eta + rho`; `G` has Hessian `modulus * I`.
    pub fn modulus(&self) -> f64 {
        1.0 / self.eta + self.rho
    }

    /// `q` in `G(z) = (modulus/2)||z||^2 - <q, z> + const`.
    fn linear_part(&self) -> Vec<f64> {
        (0..self.dimension())
            .map(|i| {
                -self.subgradient[i] + self.center[i] / self.eta + self.rho * self.global[i]
                    + self.dual[i]
                    - self.noise[i]
            })
            .collect()
    }

    pub fn value(&self, z: &[f64]) -> f64 {
        let mut v = dot(&self.subgradient, z);
        let mut prox = 0.0;
        let mut coupling = 0.0;
        for i in 0..z.len() {
            let d = z[i] - self.center[i];
            prox += d * d;
            let c = self.global[i] - z[i] + (self.dual[i] - self.noise[i]) / self.rho;
            coupling += c * c;
        }
        v += prox / (2.0 * self.eta);
        v += 0.5 * self.rho * coupling;
        v
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mu = self.modulus();
        self.linear_part()
            .iter()
            .zip(z)
            .map(|(q, x)| mu * x - q)
            .collect()
    }

    /// Minimizer of `G` over all of `R^n`.
    pub fn unconstrained_minimizer(&self) -> Vec<f64> {
        let mu = self.modulus();
        self.linear_part().into_iter().map(|q| q / mu).collect()
    }

    /// The noise vector that makes `psi` stationary for `G + g_l`, given the
    /// penalty gradient at `psi`:
    ///
    /// `xi(psi) = -f' + rho (w - psi) + lambda - grad g_l(psi) - (psi - c)/eta`
    pub fn noise_from_optimality(&self, psi: &[f64], penalty_gradient: &[f64]) -> Vec<f64> {
        (0..psi.len())
            .map(|i| {
                -self.subgradient[i] + self.rho * (self.global[i] - psi[i]) + self.dual[i]
                    - penalty_gradient[i]
                    - (psi[i] - self.center[i]) / self.eta
            })
            .collect()
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function `e^x / (1 + e^x)` without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEval {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// `g_l(z)` and `grad g_l(z) = sum_m l * sigmoid(l h_m) * grad h_m`.
pub fn penalty_value_and_gradient(
    constraints: &[std::sync::Arc<dyn InequalityConstraint>],
    sharpness: f64,
    z: &[f64],
) -> PenaltyEval {
    let mut value = 0.0;
    let mut gradient = vec![0.0; z.len()];
    for h in constraints {
        let x = sharpness * h.value(z);
        value += softplus(x);
        let weight = sharpness * sigmoid(x);
        if weight != 0.0 {
            crate::linalg::axpy(weight, &h.gradient(z), &mut gradient);
        }
    }
    PenaltyEval { value, gradient }
}

fn penalty_hessian(
    constraints: &[std::sync::Arc<dyn InequalityConstraint>],
    sharpness: f64,
    z: &[f64],
    out: &mut DMatrix<f64>,
) {
    let n = z.len();
    for h in constraints {
        let x = sharpness * h.value(z);
        let s = sigmoid(x);
        // sigma(x)(1 - sigma(x)) = sigma(x) sigma(-x), no cancellation
        let curvature = sharpness * sharpness * s * sigmoid(-x);
        let g = h.gradient(z);
        if curvature != 0.0 {
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += curvature * g[i] * g[j];
                }
            }
        }
        if s != 0.0 {
            if let Some(hess) = h.hessian(z) {
                for i in 0..n {
                    for j in 0..n {
                        out[(i, j)] += sharpness * s * hess[i * n + j];
                    }
                }
            }
        }
    }
}

/// `G + g_l` for a fixed sharpness `l`.
#[derive(Clone, Copy)]
pub struct PenalizedProblem<'a> {
    pub objective: &'a ProxObjective,
    pub constraints: &'a InequalitySet,
    pub sharpness: f64,
}

impl PenalizedProblem<'_> {
    pub fn value(&self, z: &[f64]) -> f64 {
        self.objective.value(z)
            + penalty_value_and_gradient(self.constraints.constraints(), self.sharpness, z).value
    }

    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = self.objective.gradient(z);
        let pen = penalty_value_and_gradient(self.constraints.constraints(), self.sharpness, z);
        crate::linalg::axpy(1.0, &pen.gradient, &mut g);
        g
    }

    fn hessian(&self, z: &[f64]) -> DMatrix<f64> {
        let n = z.len();
        let mut h = DMatrix::<f64>::identity(n, n) * self.objective.modulus();
        penalty_hessian(self.constraints.constraints(), self.sharpness, z, &mut h);
        h
    }
}

/// Outcome of a single Newton solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonSolution {
    pub point: Vec<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

const MAX_NEWTON_ITERATIONS: usize = 200;
const MAX_BACKTRACKS: usize = 80;

/// Minimizes `G + g_l` from the unconstrained minimizer of `G`.
pub fn solve_penalized(problem: &PenalizedProblem<'_>, tol: f64) -> Result<Vec<f64>> {
    let start = problem.objective.unconstrained_minimizer();
    solve_penalized_from(problem, &start, tol).map(|s| s.point)
}

/// Damped Newton with Armijo backtracking. Converged when the gradient norm
/// is at most `tol` or the squared Newton decrement is at most `tol^2`; the
/// latter stays meaningful at large sharpness where the gradient can only be
/// resolved to about `l * machine epsilon`. Once the predicted decrease drops
/// below the resolution of the objective value, steps must shrink the
/// gradient norm instead, and the solve stops when none does.
pub fn solve_penalized_from(
    problem: &PenalizedProblem<'_>,
    start: &[f64],
    tol: f64,
) -> Result<NewtonSolution> {
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tol}")));
    }
    if !(problem.sharpness > 0.0) {
        return Err(Error::Parameter(format!(
            "penalty sharpness must be positive, got {}",
            problem.sharpness
        )));
    }
    let n = problem.objective.dimension();
    if start.len() != n {
        return Err(dim_mismatch("starting point", n, start.len()));
    }

    let mut z = start.to_vec();
    let mut phi = problem.value(&z);
    let mut grad = problem.gradient(&z);
    let mut gnorm = norm2(&grad);

    for iter in 0..MAX_NEWTON_ITERATIONS {
        if gnorm <= tol {
            return Ok(NewtonSolution {
                point: z,
                iterations: iter,
                gradient_norm: gnorm,
            });
        }
        let hess = problem.hessian(&z);
        let g = DVector::from_column_slice(&grad);
        let direction: Vec<f64> = match hess.cholesky() {
            Some(chol) => (-chol.solve(&g)).iter().copied().collect(),
            // Penalty curvature overwhelmed the factorization; take a scaled
            // gradient step instead.
            None => grad.iter().map(|x| -x / problem.objective.modulus()).collect(),
        };
        let decrement_sq = -dot(&grad, &direction);
        if decrement_sq <= tol * tol {
            // Inside the quadratic region: one more full step is free.
            let trial: Vec<f64> = z.iter().zip(&direction).map(|(x, d)| x + d).collect();
            let trial_grad = problem.gradient(&trial);
            let trial_norm = norm2(&trial_grad);
            let (point, gradient_norm) = if trial_norm <= gnorm {
                (trial, trial_norm)
            } else {
                (z, gnorm)
            };
            return Ok(NewtonSolution {
                point,
                iterations: iter + 1,
                gradient_norm,
            });
        }

        let slope = dot(&grad, &direction);
        // Below this predicted decrease, function values no longer resolve
        // progress and the gradient norm decides instead.
        let resolvable = -slope > 1e3 * f64::EPSILON * phi.abs().max(1.0);
        let accepted = if resolvable {
            armijo_step(problem, &z, &direction, phi, slope)
        } else {
            None
        }
        .or_else(|| gradient_step(problem, &z, &direction, gnorm));
        let (next, next_phi) = match accepted {
            Some(found) => found,
            None if !resolvable => {
                return Ok(NewtonSolution {
                    point: z,
                    iterations: iter,
                    gradient_norm: gnorm,
                });
            }
            None => {
                return Err(Error::Solver {
                    message: format!("line search failed at sharpness {:.3e}", problem.sharpness),
                    gradient_norm: gnorm,
                    penalty: penalty_value_and_gradient(
                        problem.constraints.constraints(),
                        problem.sharpness,
                        &z,
                    )
                    .value,
                    iterations: iter,
                });
            }
        };
        z = next;
        phi = next_phi;
        grad = problem.gradient(&z);
        gnorm = norm2(&grad);
    }

    if gnorm <= tol {
        return Ok(NewtonSolution {
            point: z,
            iterations: MAX_NEWTON_ITERATIONS,
            gradient_norm: gnorm,
        });
    }
    Err(Error::Solver {
        message: format!(
            "Newton iteration cap reached at sharpness {:.3e}",
            problem.sharpness
        ),
        gradient_norm: gnorm,
        penalty: penalty_value_and_gradient(problem.constraints.constraints(), problem.sharpness, &z)
            .value,
        iterations: MAX_NEWTON_ITERATIONS,
    })
}

fn armijo_step(
    problem: &PenalizedProblem<'_>,
    z: &[f64],
    direction: &[f64],
    phi: f64,
    slope: f64,
) -> Option<(Vec<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let trial: Vec<f64> = z.iter().zip(direction).map(|(x, d)| x + step * d).collect();
        let trial_phi = problem.value(&trial);
        if trial_phi < phi && trial_phi <= phi + 1e-4 * step * slope {
            return Some((trial, trial_phi));
        }
        step *= 0.5;
    }
    None
}

/// Largest halving of the Newton step that shrinks the gradient norm.
fn gradient_step(
    problem: &PenalizedProblem<'_>,
    z: &[f64],
    direction: &[f64],
    gnorm: f64,
) -> Option<(Vec<f64>, f64)> {
    let mut step = 1.0;
    for _ in 0..MAX_BACKTRACKS {
        let trial: Vec<f64> = z.iter().zip(direction).map(|(x, d)| x + step * d).collect();
        if norm2(&problem.gradient(&trial)) < gnorm {
            let v = problem.value(&trial);
            return Some((trial, v));
        }
        step *= 0.5;
    }
    None
}

/// Parameters of the sharpness continuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationSettings {
    pub initial_sharpness: f64,
    pub growth: f64,
    pub max_sharpness: f64,
    /// Bound on successive-solution change and on constraint violation.
    pub feasibility_tol: f64,
    /// Inner Newton tolerance.
    pub gradient_tol: f64,
}

impl Default for ContinuationSettings {
    fn default() -> Self {
        Self {
            initial_sharpness: 1.0,
            growth: 10.0,
            max_sharpness: 1e12,
            feasibility_tol: 1e-6,
            gradient_tol: 1e-8,
        }
    }
}

/// One stage of the continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationStage {
    pub sharpness: f64,
    pub point: Vec<f64>,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationTrace {
    pub stages: Vec<ContinuationStage>,
}

impl ContinuationTrace {
    pub fn solution(&self) -> &[f64] {
        &self.stages.last().expect("trace has at least one stage").point
    }
}

/// Limit of the penalized minimizers as the sharpness grows: the minimizer
/// of `G` over the inequality set.
pub fn constrained_solve(
    objective: &ProxObjective,
    constraints: &InequalitySet,
    settings: &ContinuationSettings,
) -> Result<Vec<f64>> {
    constrained_solve_traced(objective, constraints, settings).map(|t| t.solution().to_vec())
}

pub fn constrained_solve_traced(
    objective: &ProxObjective,
    constraints: &InequalitySet,
    settings: &ContinuationSettings,
) -> Result<ContinuationTrace> {
    if !(settings.initial_sharpness > 0.0) || !(settings.growth > 1.0) {
        return Err(Error::Parameter(
            "continuation needs a positive initial sharpness and growth > 1".into(),
        ));
    }
    if constraints.interior_point().len() != objective.dimension() {
        return Err(dim_mismatch(
            "interior point",
            objective.dimension(),
            constraints.interior_point().len(),
        ));
    }

    let mut z = objective.unconstrained_minimizer();
    if constraints.is_empty() {
        return Ok(ContinuationTrace {
            stages: vec![ContinuationStage {
                sharpness: settings.initial_sharpness,
                point: z,
                newton_iterations: 0,
            }],
        });
    }

    let mut stages: Vec<ContinuationStage> = Vec::new();
    let mut sharpness = settings.initial_sharpness;
    while sharpness <= settings.max_sharpness {
        let problem = PenalizedProblem {
            objective,
            constraints,
            sharpness,
        };
        let sol = solve_penalized_from(&problem, &z, settings.gradient_tol)?;
        let moved = dist2(&sol.point, &z);
        let first = stages.is_empty();
        z = sol.point;
        stages.push(ContinuationStage {
            sharpness,
            point: z.clone(),
            newton_iterations: sol.iterations,
        });
        if !first
            && moved <= settings.feasibility_tol
            && constraints.violation(&z) <= settings.feasibility_tol
        {
            return Ok(ContinuationTrace { stages });
        }
        sharpness *= settings.growth;
    }

    let last = &stages.last().expect("at least one stage ran").point;
    Err(Error::Solver {
        message: format!(
            "sharpness cap {:.1e} reached; violation {:.3e}",
            settings.max_sharpness,
            constraints.violation(last)
        ),
        gradient_norm: norm2(
            &PenalizedProblem {
                objective,
                constraints,
                sharpness: settings.max_sharpness,
            }
            .gradient(last),
        ),
        penalty: penalty_value_and_gradient(constraints.constraints(), settings.max_sharpness, last)
            .value,
        iterations: stages.len(),
    })
}
