//! Consensus problem model: local objectives, local constraint sets, the
//! shared iterate state, and the objective/feasibility measurements used by
//! every other module.
//!
//! Each agent `p` owns a local copy `z_p` of the global variable `w` and the
//! problem is
//!
//! ```text
//! minimize   sum_p f_p(z_p)
//! subject to z_p in W_p,  w = z_p   for all p
//! ```
//!
//! Objectives are opaque oracles: any data they are built from stays inside
//! the implementing type and the engine only ever sees values and
//! subgradients.

use std::fmt;
use std::sync::Arc;

use crate::error::{dim_mismatch, Error, Result};
use crate::linalg::{dist2, dot};

/// Curvature regime of a local objective. Selects the step-size schedule and
/// the convergence bound that applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothnessDescriptor {
    /// Convex with `L`-Lipschitz gradient.
    Smooth { lipschitz: f64 },
    /// Convex, subgradients only.
    Nonsmooth,
    /// `alpha`-strongly convex.
    StronglyConvex { modulus: f64 },
}

impl SmoothnessDescriptor {
    pub fn smooth(lipschitz: f64) -> Result<Self> {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::Parameter(format!(
                "smoothness constant must be positive and finite, got {lipschitz}"
            )));
        }
        Ok(Self::Smooth { lipschitz })
    }

    pub fn strongly_convex(modulus: f64) -> Result<Self> {
        if !(modulus > 0.0 && modulus.is_finite()) {
            return Err(Error::Parameter(format!(
                "strong convexity modulus must be positive and finite, got {modulus}"
            )));
        }
        Ok(Self::StronglyConvex { modulus })
    }

    pub fn regime(&self) -> Regime {
        match self {
            Self::Smooth { .. } => Regime::Smooth,
            Self::Nonsmooth => Regime::Nonsmooth,
            Self::StronglyConvex { .. } => Regime::StronglyConvex,
        }
    }
}

/// The three analysed regimes, without their constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Smooth,
    Nonsmooth,
    StronglyConvex,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Smooth => "smooth",
            Regime::Nonsmooth => "nonsmooth",
            Regime::StronglyConvex => "strongly-convex",
        })
    }
}

/// Local objective oracle `f_p`.
pub trait LocalObjective: Send + Sync {
    fn value(&self, z: &[f64]) -> f64;
    /// Any element of the subdifferential at `z`.
    fn subgradient(&self, z: &[f64]) -> Vec<f64>;
    fn smoothness(&self) -> SmoothnessDescriptor;
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Objective assembled from a pair of closures.
pub struct FnObjective {
    value: Box<ValueFn>,
    subgradient: Box<GradFn>,
    smoothness: SmoothnessDescriptor,
}

impl FnObjective {
    pub fn new<V, G>(value: V, subgradient: G, smoothness: SmoothnessDescriptor) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Self {
            value: Box::new(value),
            subgradient: Box::new(subgradient),
            smoothness,
        }
    }
}

impl LocalObjective for FnObjective {
    fn value(&self, z: &[f64]) -> f64 {
        (self.value)(z)
    }

    fn subgradient(&self, z: &[f64]) -> Vec<f64> {
        (self.subgradient)(z)
    }

    fn smoothness(&self) -> SmoothnessDescriptor {
        self.smoothness
    }
}

/// A convex, twice continuously differentiable constraint `h(z) <= 0`.
/// Convexity is asserted by the implementor, not checked.
pub trait InequalityConstraint: Send + Sync {
    fn value(&self, z: &[f64]) -> f64;
    fn gradient(&self, z: &[f64]) -> Vec<f64>;
    /// Row-major `n x n` Hessian, or `None` when it is identically zero.
    fn hessian(&self, z: &[f64]) -> Option<Vec<f64>>;
}

/// `a^T z - b <= 0`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInequality {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl LinearInequality {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }
}

impl InequalityConstraint for LinearInequality {
    fn value(&self, z: &[f64]) -> f64 {
        dot(&self.normal, z) - self.offset
    }

    fn gradient(&self, _z: &[f64]) -> Vec<f64> {
        self.normal.clone()
    }

    fn hessian(&self, _z: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `||z - center||^2 - radius^2 <= 0`
#[derive(Debug, Clone, PartialEq)]
pub struct BallInequality {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl InequalityConstraint for BallInequality {
    fn value(&self, z: &[f64]) -> f64 {
        let d = dist2(z, &self.center);
        d * d - self.radius * self.radius
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.center).map(|(x, c)| 2.0 * (x - c)).collect()
    }

    fn hessian(&self, z: &[f64]) -> Option<Vec<f64>> {
        let n = z.len();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 2.0;
        }
        Some(h)
    }
}

/// A set `{ z : h_m(z) <= 0 for all m }` together with a strictly feasible
/// point and, optionally, a box known to contain it.
#[derive(Clone)]
pub struct InequalitySet {
    constraints: Vec<Arc<dyn InequalityConstraint>>,
    interior_point: Vec<f64>,
    bounding_box: Option<(Vec<f64>, Vec<f64>)>,
}

impl fmt::Debug for InequalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InequalitySet")
            .field("constraints", &self.constraints.len())
            .field("interior_point", &self.interior_point)
            .field("bounding_box", &self.bounding_box)
            .finish()
    }
}

impl InequalitySet {
    /// Fails unless `interior_point` is strictly feasible for every constraint.
    pub fn new(
        constraints: Vec<Arc<dyn InequalityConstraint>>,
        interior_point: Vec<f64>,
    ) -> Result<Self> {
        for (m, h) in constraints.iter().enumerate() {
            let v = h.value(&interior_point);
            if !(v < 0.0) {
                return Err(Error::Input(format!(
                    "interior point is not strictly feasible for constraint {m} (h = {v})"
                )));
            }
            let g = h.gradient(&interior_point);
            if g.len() != interior_point.len() {
                return Err(dim_mismatch("constraint gradient", interior_point.len(), g.len()));
            }
        }
        Ok(Self {
            constraints,
            interior_point,
            bounding_box: None,
        })
    }

    /// Encodes `lower <= z <= upper` as `2n` linear inequalities.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(dim_mismatch("box upper bound", lower.len(), upper.len()));
        }
        let n = lower.len();
        let mut constraints: Vec<Arc<dyn InequalityConstraint>> = Vec::with_capacity(2 * n);
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            constraints.push(Arc::new(LinearInequality::new(e.clone(), upper[i])));
            e[i] = -1.0;
            constraints.push(Arc::new(LinearInequality::new(e, -lower[i])));
        }
        let mid = lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect();
        Ok(Self::new(constraints, mid)?.with_bounding_box(lower.to_vec(), upper.to_vec()))
    }

    pub fn with_bounding_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.bounding_box = Some((lower, upper));
        self
    }

    pub fn constraints(&self) -> &[Arc<dyn InequalityConstraint>] {
        &self.constraints
    }

    pub fn interior_point(&self) -> &[f64] {
        &self.interior_point
    }

    pub fn bounding_box(&self) -> Option<(&[f64], &[f64])> {
        self.bounding_box
            .as_ref()
            .map(|(l, u)| (l.as_slice(), u.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    /// `max_m max(0, h_m(z))`
    pub fn violation(&self, z: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|h| h.value(z).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Local feasible region `W_p`.
#[derive(Debug, Clone)]
pub enum ConstraintSet {
    Unconstrained,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    SmoothInequalities(InequalitySet),
}

impl ConstraintSet {
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(dim_mismatch("box upper bound", lower.len(), upper.len()));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::Input(format!(
                "box bound {i} has lower {} > upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self::Box { lower, upper })
    }

    /// `[-u, u]^n`
    pub fn symmetric_box(n: usize, half_width: f64) -> Result<Self> {
        Self::boxed(vec![-half_width; n], vec![half_width; n])
    }

    fn check_dimension(&self, n: usize) -> Result<()> {
        match self {
            Self::Unconstrained => Ok(()),
            Self::Box { lower, .. } if lower.len() != n => {
                Err(dim_mismatch("box bounds", n, lower.len()))
            }
            Self::Box { .. } => Ok(()),
            Self::SmoothInequalities(set) if set.interior_point().len() != n => {
                Err(dim_mismatch("interior point", n, set.interior_point().len()))
            }
            Self::SmoothInequalities(_) => Ok(()),
        }
    }

    /// Largest amount by which `z` breaks any constraint; zero when feasible.
    pub fn violation(&self, z: &[f64]) -> f64 {
        match self {
            Self::Unconstrained => 0.0,
            Self::Box { lower, upper } => z
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| (l - x).max(x - u).max(0.0))
                .fold(0.0, f64::max),
            Self::SmoothInequalities(set) => set.violation(z),
        }
    }

    /// Diameter `max ||u - v||` over the set, when it is known to be bounded.
    /// For inequality sets this is the diameter of the supplied bounding box,
    /// an upper bound.
    pub fn diameter(&self) -> Option<f64> {
        match self {
            Self::Unconstrained => None,
            Self::Box { lower, upper } => Some(dist2(lower, upper)),
            Self::SmoothInequalities(set) => set.bounding_box().map(|(l, u)| dist2(l, u)),
        }
    }

    /// Bounds of a box enclosing the set, when one is known.
    pub fn enclosing_box(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Self::Unconstrained => None,
            Self::Box { lower, upper } => Some((lower, upper)),
            Self::SmoothInequalities(set) => set.bounding_box(),
        }
    }
}

/// The consensus problem over `P` agents in `R^n`.
#[derive(Clone)]
pub struct ConsensusProblem {
    dimension: usize,
    objectives: Vec<Arc<dyn LocalObjective>>,
    constraints: Vec<ConstraintSet>,
    witness: Vec<f64>,
}

impl fmt::Debug for ConsensusProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConsensusProblem")
            .field("dimension", &self.dimension)
            .field("agents", &self.objectives.len())
            .field("constraints", &self.constraints)
            .field("witness", &self.witness)
            .finish()
    }
}

/// Tolerance used when checking the witness point.
const WITNESS_TOL: f64 = 1e-9;

impl ConsensusProblem {
    /// `witness` must lie in every `W_p`; it certifies that the intersection
    /// is nonempty and serves as the default starting point.
    pub fn new(
        dimension: usize,
        objectives: Vec<Arc<dyn LocalObjective>>,
        constraints: Vec<ConstraintSet>,
        witness: Vec<f64>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::Input("dimension must be at least 1".into()));
        }
        if objectives.is_empty() {
            return Err(Error::Input("at least one agent is required".into()));
        }
        if constraints.len() != objectives.len() {
            return Err(dim_mismatch(
                "constraint sets",
                objectives.len(),
                constraints.len(),
            ));
        }
        if witness.len() != dimension {
            return Err(dim_mismatch("witness point", dimension, witness.len()));
        }
        for (p, (f, w_p)) in objectives.iter().zip(&constraints).enumerate() {
            w_p.check_dimension(dimension)?;
            let v = w_p.violation(&witness);
            if v > WITNESS_TOL {
                return Err(Error::Input(format!(
                    "witness point violates the constraint set of agent {p} by {v}"
                )));
            }
            let g = f.subgradient(&witness);
            if g.len() != dimension {
                return Err(dim_mismatch(&format!("subgradient of agent {p}"), dimension, g.len()));
            }
        }
        Ok(Self {
            dimension,
            objectives,
            constraints,
            witness,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.objectives.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn objective(&self, p: usize) -> &dyn LocalObjective {
        self.objectives[p].as_ref()
    }

    pub fn constraint_set(&self, p: usize) -> &ConstraintSet {
        &self.constraints[p]
    }

    pub fn constraint_sets(&self) -> &[ConstraintSet] {
        &self.constraints
    }

    pub fn witness(&self) -> &[f64] {
        &self.witness
    }

    fn check_iterates(&self, z: &[Vec<f64>]) -> Result<()> {
        if z.len() != self.agent_count() {
            return Err(dim_mismatch("local iterates", self.agent_count(), z.len()));
        }
        for z_p in z {
            if z_p.len() != self.dimension {
                return Err(dim_mismatch("local iterate", self.dimension, z_p.len()));
            }
        }
        Ok(())
    }
}

/// `F(z) = sum_p f_p(z_p)`
pub fn evaluate_global_objective(problem: &ConsensusProblem, z: &[Vec<f64>]) -> Result<f64> {
    problem.check_iterates(z)?;
    Ok(problem
        .objectives
        .iter()
        .zip(z)
        .map(|(f, z_p)| f.value(z_p))
        .sum())
}

/// `sum_{p in agents} f_p(z_p)`
pub fn evaluate_partial_objective(
    problem: &ConsensusProblem,
    z: &[Vec<f64>],
    agents: &[usize],
) -> Result<f64> {
    problem.check_iterates(z)?;
    agents
        .iter()
        .map(|&p| {
            problem
                .objectives
                .get(p)
                .map(|f| f.value(&z[p]))
                .ok_or_else(|| Error::Input(format!("agent index {p} out of range")))
        })
        .sum()
}

/// Algorithm state between communication rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    /// Index of the round about to run (or just completed, after `finalize`).
    pub round: usize,
    pub w: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    /// Inner iterates `z_p^{t,2..E+1}` of the last completed round.
    pub inner: Vec<Vec<Vec<f64>>>,
}

impl IterateState {
    /// Zero duals and every local copy at the problem's witness point.
    pub fn initial(problem: &ConsensusProblem) -> Self {
        let p = problem.agent_count();
        let n = problem.dimension();
        Self {
            round: 1,
            w: problem.witness().to_vec(),
            z: vec![problem.witness().to_vec(); p],
            lambda: vec![vec![0.0; n]; p],
            inner: vec![Vec::new(); p],
        }
    }

    pub fn with_start(
        problem: &ConsensusProblem,
        z: Vec<Vec<f64>>,
        lambda: Vec<Vec<f64>>,
    ) -> Result<Self> {
        problem.check_iterates(&z)?;
        problem.check_iterates(&lambda)?;
        let p = problem.agent_count();
        Ok(Self {
            round: 1,
            w: problem.witness().to_vec(),
            z,
            lambda,
            inner: vec![Vec::new(); p],
        })
    }

    /// `sum_p lambda_p`
    pub fn dual_sum(&self) -> Vec<f64> {
        let n = self.w.len();
        let mut s = vec![0.0; n];
        for l in &self.lambda {
            crate::linalg::axpy(1.0, l, &mut s);
        }
        s
    }
}

/// Consensus gap and worst constraint violation of a set of iterates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `sqrt(sum_p ||w - z_p||^2)`
    pub consensus: f64,
    /// `max_p max(0, worst violation of z_p in W_p)`
    pub violation: f64,
}

pub fn residuals(problem: &ConsensusProblem, state: &IterateState) -> Result<Residuals> {
    residuals_of(problem, &state.w, &state.z)
}

pub fn residuals_of(problem: &ConsensusProblem, w: &[f64], z: &[Vec<f64>]) -> Result<Residuals> {
    problem.check_iterates(z)?;
    if w.len() != problem.dimension() {
        return Err(dim_mismatch("global iterate", problem.dimension(), w.len()));
    }
    let consensus = z
        .iter()
        .map(|z_p| {
            let d = dist2(w, z_p);
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let violation = problem
        .constraints
        .iter()
        .zip(z)
        .map(|(c, z_p)| c.violation(z_p))
        .fold(0.0, f64::max);
    Ok(Residuals {
        consensus,
        violation,
    })
}
