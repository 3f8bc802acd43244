//! Linearized ADMM with `E` objective-perturbed local updates per round.
//!
//! Each round the server averages `z_p - lambda_p / rho` into `w`, every
//! agent takes `E` proximal steps on the linearized, noise-shifted local
//! objective, releases the mean of its inner iterates, and both sides apply
//! the same dual update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{LedgerEntry, PrivacyLedger};
use crate::error::{dim_mismatch, Error, Result};
use crate::mechanism::{
    add_noise, sample_noise, MechanismConfig, MechanismKind, PerturbationMode, SensitivityQuery,
};
use crate::penalty::{constrained_solve, ContinuationSettings, ProxObjective};
use crate::problem::{ConsensusProblem, ConstraintSet, IterateState, Regime, SmoothnessDescriptor};

/// Penalty parameter schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RhoSchedule {
    Constant { value: f64 },
    /// `min(cap, c1 * 1.2^floor(t / period) + c2 / eps)`
    Dynamic {
        c1: f64,
        c2: f64,
        period: usize,
        #[serde(default = "default_cap")]
        cap: f64,
    },
}

fn default_cap() -> f64 {
    RhoSchedule::DEFAULT_CAP
}

impl Default for RhoSchedule {
    fn default() -> Self {
        Self::Constant { value: 1.0 }
    }
}

impl RhoSchedule {
    pub const DEFAULT_CAP: f64 = 1e9;

    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    pub fn dynamic(c1: f64, c2: f64, period: usize) -> Self {
        Self::Dynamic {
            c1,
            c2,
            period,
            cap: Self::DEFAULT_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub rho: RhoSchedule,
    pub eta_regime: Regime,
    /// Per-step budget driving the smooth step size and the dynamic `rho`;
    /// infinite in non-private runs.
    pub epsilon: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "schedule budget must be positive, got {}",
                self.epsilon
            )));
        }
        match self.rho {
            RhoSchedule::Constant { value } if !(value > 0.0 && value.is_finite()) => Err(
                Error::Config(format!("rho must be positive and finite, got {value}")),
            ),
            RhoSchedule::Dynamic { c1, c2, period, cap }
                if !(c1 > 0.0 && c2 >= 0.0 && period >= 1 && cap > 0.0 && cap.is_finite()) =>
            {
                Err(Error::Config(format!(
                    "invalid dynamic rho (c1 = {c1}, c2 = {c2}, period = {period}, cap = {cap})"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// `rho^t` for round `t >= 1`.
pub fn rho_schedule(config: &ScheduleConfig, t: usize) -> f64 {
    match config.rho {
        RhoSchedule::Constant { value } => value,
        RhoSchedule::Dynamic { c1, c2, period, cap } => {
            let growth = 1.2f64.powi((t / period.max(1)) as i32);
            let privacy = if config.epsilon.is_finite() {
                c2 / config.epsilon
            } else {
                0.0
            };
            (c1 * growth + privacy).min(cap)
        }
    }
}

/// `eta^t` for round `t >= 1`: `1/(L + sqrt(t)/eps)`, `1/sqrt(t)` or
/// `2/(alpha (t + 2))`. The smooth schedule becomes `1/L` when `eps` is
/// infinite.
pub fn eta_schedule(
    config: &ScheduleConfig,
    descriptor: &SmoothnessDescriptor,
    t: usize,
) -> Result<f64> {
    let t = t as f64;
    match config.eta_regime {
        Regime::Smooth => {
            let SmoothnessDescriptor::Smooth { lipschitz } = descriptor else {
                return Err(Error::Config(
                    "smooth step size needs a smoothness constant".into(),
                ));
            };
            if config.epsilon.is_finite() {
                Ok(1.0 / (lipschitz + t.sqrt() / config.epsilon))
            } else {
                Ok(1.0 / lipschitz)
            }
        }
        Regime::Nonsmooth => Ok(1.0 / t.sqrt()),
        Regime::StronglyConvex => {
            let SmoothnessDescriptor::StronglyConvex { modulus } = descriptor else {
                return Err(Error::Config(
                    "strongly convex step size needs a modulus".into(),
                ));
            };
            Ok(2.0 / (modulus * (t + 2.0)))
        }
    }
}

/// Descriptor valid for every agent: the largest `L` if all are smooth, the
/// smallest `alpha` if all are strongly convex, nonsmooth otherwise.
pub fn common_smoothness(problem: &ConsensusProblem) -> SmoothnessDescriptor {
    let descriptors: Vec<_> = (0..problem.agent_count())
        .map(|p| problem.objective(p).smoothness())
        .collect();
    let lipschitz: Option<Vec<f64>> = descriptors
        .iter()
        .map(|d| match d {
            SmoothnessDescriptor::Smooth { lipschitz } => Some(*lipschitz),
            _ => None,
        })
        .collect();
    if let Some(ls) = lipschitz {
        return SmoothnessDescriptor::Smooth {
            lipschitz: ls.into_iter().fold(0.0, f64::max),
        };
    }
    let moduli: Option<Vec<f64>> = descriptors
        .iter()
        .map(|d| match d {
            SmoothnessDescriptor::StronglyConvex { modulus } => Some(*modulus),
            _ => None,
        })
        .collect();
    if let Some(ms) = moduli {
        return SmoothnessDescriptor::StronglyConvex {
            modulus: ms.into_iter().fold(f64::INFINITY, f64::min),
        };
    }
    SmoothnessDescriptor::Nonsmooth
}

/// `w = (1/P) sum_p (z_p - lambda_p / rho)`
pub fn global_update(state: &IterateState, rho: f64) -> Result<Vec<f64>> {
    if !(rho > 0.0) {
        return Err(Error::Parameter(format!("rho must be positive, got {rho}")));
    }
    let n = state.w.len();
    let p = state.z.len() as f64;
    let mut w = vec![0.0; n];
    for (z_p, l_p) in state.z.iter().zip(&state.lambda) {
        for i in 0..n {
            w[i] += z_p[i] - l_p[i] / rho;
        }
    }
    w.iter_mut().for_each(|x| *x /= p);
    Ok(w)
}

/// Minimizer of the proximal subproblem over `W_p`. Closed form, clipped for
/// boxes (the objective is a separable quadratic); penalty continuation for
/// smooth inequality sets.
pub fn solve_subproblem(
    set: &ConstraintSet,
    prox: &ProxObjective,
    settings: &ContinuationSettings,
) -> Result<Vec<f64>> {
    match set {
        ConstraintSet::Unconstrained => Ok(prox.unconstrained_minimizer()),
        ConstraintSet::Box { lower, upper } => Ok(prox
            .unconstrained_minimizer()
            .into_iter()
            .zip(lower.iter().zip(upper))
            .map(|(x, (l, u))| x.clamp(*l, *u))
            .collect()),
        ConstraintSet::SmoothInequalities(ineq) => constrained_solve(prox, ineq, settings),
    }
}

/// One objective-perturbed local step of agent `p` from inner iterate
/// `center`, against the current `w` and `lambda_p` held in `state`.
pub fn local_update(
    problem: &ConsensusProblem,
    p: usize,
    state: &IterateState,
    center: &[f64],
    rho: f64,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    local_update_with(
        problem,
        p,
        state,
        center,
        rho,
        eta,
        noise,
        &ContinuationSettings::default(),
    )
}

#[allow(clippy::too_many_arguments)]
pub fn local_update_with(
    problem: &ConsensusProblem,
    p: usize,
    state: &IterateState,
    center: &[f64],
    rho: f64,
    eta: f64,
    noise: &[f64],
    settings: &ContinuationSettings,
) -> Result<Vec<f64>> {
    if p >= problem.agent_count() {
        return Err(Error::Input(format!("agent index {p} out of range")));
    }
    let n = problem.dimension();
    if center.len() != n {
        return Err(dim_mismatch("inner iterate", n, center.len()));
    }
    let prox = ProxObjective::new(
        problem.objective(p).subgradient(center),
        center.to_vec(),
        state.w.clone(),
        state.lambda[p].clone(),
        noise.to_vec(),
        eta,
        rho,
    )?;
    solve_subproblem(problem.constraint_set(p), &prox, settings)
}

/// Agent update after its `E` inner steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundClose {
    pub z: Vec<f64>,
    pub lambda: Vec<f64>,
}

/// `z_p = (1/E) sum_e z_p^{t,e+1}` and `lambda_p + rho (w - z_p)`. The
/// server performs the identical computation.
pub fn finalize_round(
    state: &IterateState,
    p: usize,
    inner: &[Vec<f64>],
    rho: f64,
) -> Result<RoundClose> {
    if inner.is_empty() {
        return Err(Error::Input("at least one inner iterate is required".into()));
    }
    let z = crate::linalg::mean(inner);
    let lambda = state.lambda[p]
        .iter()
        .zip(state.w.iter().zip(&z))
        .map(|(l, (w, z))| l + rho * (w - z))
        .collect();
    Ok(RoundClose { z, lambda })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub seed: u64,
    /// Keep a copy of the state after every round.
    pub keep_trajectory: bool,
    /// Run the agents of a round on the rayon pool. Results do not depend
    /// on this flag.
    pub parallel_agents: bool,
    pub continuation: ContinuationSettings,
}

impl RunConfig {
    pub fn new(rounds: usize, local_steps: usize, seed: u64) -> Self {
        Self {
            rounds,
            local_steps,
            seed,
            keep_trajectory: false,
            parallel_agents: false,
            continuation: ContinuationSettings::default(),
        }
    }
}

/// Running sums behind the averaged iterates `z^(T)` and `w^(T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageAccumulator {
    rounds: usize,
    local_steps: usize,
    outputs: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    weighted_inputs: Vec<Vec<f64>>,
    w: Vec<f64>,
    weighted_w: Vec<f64>,
    weight: f64,
}

/// Averaged iterates after `T` rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Averages {
    pub rounds: usize,
    /// `(1/TE) sum_t sum_e z^{t,e+1}`
    pub z_outputs: Vec<Vec<f64>>,
    /// `(1/TE) sum_t sum_e z^{t,e}`
    pub z_inputs: Vec<Vec<f64>>,
    /// `(2/(T(T+1))) sum_t t (1/E) sum_e z^{t,e}`
    pub z_weighted: Vec<Vec<f64>>,
    /// `(1/T) sum_t w^{t+1}`
    pub w_uniform: Vec<f64>,
    /// `(2/(T(T+1))) sum_t t w^{t+1}`
    pub w_weighted: Vec<f64>,
}

impl Averages {
    /// `(z^(T), w^(T))` as defined for the given regime's bound.
    pub fn for_regime(&self, regime: Regime) -> (&[Vec<f64>], &[f64]) {
        match regime {
            Regime::Smooth => (&self.z_outputs, &self.w_uniform),
            Regime::Nonsmooth => (&self.z_inputs, &self.w_uniform),
            Regime::StronglyConvex => (&self.z_weighted, &self.w_weighted),
        }
    }
}

impl AverageAccumulator {
    pub fn new(agents: usize, n: usize) -> Self {
        Self {
            rounds: 0,
            local_steps: 0,
            outputs: vec![vec![0.0; n]; agents],
            inputs: vec![vec![0.0; n]; agents],
            weighted_inputs: vec![vec![0.0; n]; agents],
            w: vec![0.0; n],
            weighted_w: vec![0.0; n],
            weight: 0.0,
        }
    }

    /// Adds round `t` given each agent's inner inputs `z^{t,1..E}`, outputs
    /// `z^{t,2..E+1}` and the global iterate `w^{t+1}`.
    pub fn add_round(
        &mut self,
        t: usize,
        inputs: &[Vec<Vec<f64>>],
        outputs: &[Vec<Vec<f64>>],
        w: &[f64],
    ) {
        let tw = t as f64;
        self.rounds += 1;
        for p in 0..inputs.len() {
            let e = inputs[p].len() as f64;
            for (zin, zout) in inputs[p].iter().zip(&outputs[p]) {
                crate::linalg::axpy(1.0, zin, &mut self.inputs[p]);
                crate::linalg::axpy(1.0, zout, &mut self.outputs[p]);
                crate::linalg::axpy(tw / e, zin, &mut self.weighted_inputs[p]);
            }
        }
        self.local_steps += inputs.first().map_or(0, Vec::len);
        crate::linalg::axpy(1.0, w, &mut self.w);
        crate::linalg::axpy(tw, w, &mut self.weighted_w);
        self.weight += tw;
    }

    pub fn snapshot(&self) -> Averages {
        let te = self.local_steps.max(1) as f64;
        let t = self.rounds.max(1) as f64;
        let weight = if self.weight > 0.0 { self.weight } else { 1.0 };
        let scaled = |vs: &[Vec<f64>], c: f64| -> Vec<Vec<f64>> {
            vs.iter()
                .map(|v| v.iter().map(|x| x / c).collect())
                .collect()
        };
        Averages {
            rounds: self.rounds,
            z_outputs: scaled(&self.outputs, te),
            z_inputs: scaled(&self.inputs, te),
            z_weighted: scaled(&self.weighted_inputs, weight),
            w_uniform: self.w.iter().map(|x| x / t).collect(),
            w_weighted: self.weighted_w.iter().map(|x| x / weight).collect(),
        }
    }
}

/// What an observer sees after each round.
#[derive(Debug)]
pub struct RoundReport<'a> {
    pub round: usize,
    pub rho: f64,
    pub eta: f64,
    /// State after the dual update; `state.round` is the next round.
    pub state: &'a IterateState,
    /// Noise drawn this round, indexed `[p][e]`.
    pub noise: &'a [Vec<Vec<f64>>],
    pub averages: &'a AverageAccumulator,
    pub ledger: &'a PrivacyLedger,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: IterateState,
    pub trajectory: Option<Vec<IterateState>>,
    pub averages: Averages,
    pub ledger: PrivacyLedger,
}

pub fn run(
    problem: &ConsensusProblem,
    schedule: &ScheduleConfig,
    mechanism: &MechanismConfig,
    config: &RunConfig,
) -> Result<RunOutput> {
    run_with_observer(problem, schedule, mechanism, config, |_| {})
}

pub fn run_from(
    problem: &ConsensusProblem,
    schedule: &ScheduleConfig,
    mechanism: &MechanismConfig,
    config: &RunConfig,
    start: IterateState,
    observer: impl FnMut(&RoundReport<'_>),
) -> Result<RunOutput> {
    Engine::new(problem, schedule, mechanism, config)?.execute(start, observer)
}

pub fn run_with_observer(
    problem: &ConsensusProblem,
    schedule: &ScheduleConfig,
    mechanism: &MechanismConfig,
    config: &RunConfig,
    observer: impl FnMut(&RoundReport<'_>),
) -> Result<RunOutput> {
    run_from(
        problem,
        schedule,
        mechanism,
        config,
        IterateState::initial(problem),
        observer,
    )
}

struct Engine<'a> {
    problem: &'a ConsensusProblem,
    schedule: &'a ScheduleConfig,
    mechanism: &'a MechanismConfig,
    config: &'a RunConfig,
    descriptor: SmoothnessDescriptor,
}

/// Everything one agent produces in one round.
struct AgentRound {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    noise: Vec<Vec<f64>>,
}

impl<'a> Engine<'a> {
    fn new(
        problem: &'a ConsensusProblem,
        schedule: &'a ScheduleConfig,
        mechanism: &'a MechanismConfig,
        config: &'a RunConfig,
    ) -> Result<Self> {
        if config.rounds == 0 || config.local_steps == 0 {
            return Err(Error::Config(format!(
                "rounds and local steps must be at least 1 (T = {}, E = {})",
                config.rounds, config.local_steps
            )));
        }
        schedule.validate()?;
        let descriptor = common_smoothness(problem);
        eta_schedule(schedule, &descriptor, 1)?;
        if schedule.eta_regime == Regime::Smooth && !schedule.epsilon.is_finite() {
            log::info!("non-private smooth run: using the constant step size 1/L");
        }
        Ok(Self {
            problem,
            schedule,
            mechanism,
            config,
            descriptor,
        })
    }

    fn execute(
        &self,
        mut state: IterateState,
        mut observer: impl FnMut(&RoundReport<'_>),
    ) -> Result<RunOutput> {
        let agents = self.problem.agent_count();
        let n = self.problem.dimension();
        let mut rngs: Vec<ChaCha8Rng> = (0..agents)
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(p as u64);
                rng
            })
            .collect();
        let mut chains: Vec<Vec<f64>> = (0..agents)
            .map(|p| {
                state.inner[p]
                    .last()
                    .cloned()
                    .unwrap_or_else(|| state.z[p].clone())
            })
            .collect();
        let mut averages = AverageAccumulator::new(agents, n);
        let mut ledger = PrivacyLedger::new();
        let mut trajectory = self.config.keep_trajectory.then(Vec::new);
        let first_round = state.round;

        for t in first_round..first_round + self.config.rounds {
            let rho = rho_schedule(self.schedule, t);
            let eta = eta_schedule(self.schedule, &self.descriptor, t)?;
            state.w = global_update(&state, rho)?;

            let step = |(p, (rng, chain)): (usize, (&mut ChaCha8Rng, &mut Vec<f64>))| {
                self.agent_round(&state, p, t, rho, eta, rng, chain)
            };
            let results: Vec<Result<AgentRound>> = if self.config.parallel_agents {
                rngs.par_iter_mut()
                    .zip(chains.par_iter_mut())
                    .enumerate()
                    .map(step)
                    .collect()
            } else {
                rngs.iter_mut()
                    .zip(chains.iter_mut())
                    .enumerate()
                    .map(step)
                    .collect()
            };
            let rounds: Vec<AgentRound> = results.into_iter().collect::<Result<_>>()?;

            let mut closes = Vec::with_capacity(agents);
            for (p, r) in rounds.iter().enumerate() {
                closes.push(finalize_round(&state, p, &r.outputs, rho)?);
            }
            for (p, close) in closes.into_iter().enumerate() {
                state.z[p] = close.z;
                state.lambda[p] = close.lambda;
            }
            let mut inputs = Vec::with_capacity(agents);
            let mut noise = Vec::with_capacity(agents);
            for (p, r) in rounds.into_iter().enumerate() {
                inputs.push(r.inputs);
                noise.push(r.noise);
                state.inner[p] = r.outputs;
            }
            averages.add_round(t, &inputs, &state.inner, &state.w);
            for e in 1..=self.config.local_steps {
                ledger.record(self.ledger_entry(t, e));
            }
            state.round = t + 1;

            observer(&RoundReport {
                round: t,
                rho,
                eta,
                state: &state,
                noise: &noise,
                averages: &averages,
                ledger: &ledger,
            });
            if let Some(traj) = trajectory.as_mut() {
                traj.push(state.clone());
            }
        }

        Ok(RunOutput {
            state,
            trajectory,
            averages: averages.snapshot(),
            ledger,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn agent_round(
        &self,
        state: &IterateState,
        p: usize,
        t: usize,
        rho: f64,
        eta: f64,
        rng: &mut ChaCha8Rng,
        chain: &mut Vec<f64>,
    ) -> Result<AgentRound> {
        let e_count = self.config.local_steps;
        let n = self.problem.dimension();
        let mut out = AgentRound {
            inputs: Vec::with_capacity(e_count),
            outputs: Vec::with_capacity(e_count),
            noise: Vec::with_capacity(e_count),
        };
        let zero = vec![0.0; n];
        for e in 1..=e_count {
            let sensitivity = self.mechanism.sensitivity.evaluate(&SensitivityQuery {
                round: t,
                local_step: e,
                agent: p,
                iterate: chain,
                eta,
                rho,
            });
            let xi = sample_noise(self.mechanism, &sensitivity, n, rng)?;
            let next = match self.mechanism.mode {
                PerturbationMode::Objective => local_update_with(
                    self.problem,
                    p,
                    state,
                    chain,
                    rho,
                    eta,
                    &xi,
                    &self.config.continuation,
                )?,
                PerturbationMode::Output => {
                    let clean = local_update_with(
                        self.problem,
                        p,
                        state,
                        chain,
                        rho,
                        eta,
                        &zero,
                        &self.config.continuation,
                    )?;
                    add_noise(&clean, &xi)
                }
            };
            out.inputs.push(std::mem::replace(chain, next.clone()));
            out.outputs.push(next);
            out.noise.push(xi);
        }
        Ok(out)
    }

    fn ledger_entry(&self, t: usize, e: usize) -> LedgerEntry {
        let private = self.mechanism.is_private();
        LedgerEntry {
            kind: if private {
                self.mechanism.kind
            } else {
                MechanismKind::None
            },
            epsilon: if private {
                self.mechanism.epsilon
            } else {
                f64::INFINITY
            },
            delta: if private { self.mechanism.delta } else { 0.0 },
            round: t,
            local_step: e,
        }
    }
}
