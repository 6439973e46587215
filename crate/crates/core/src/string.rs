//! String iteration (stochastic Beg) and temperature schedules.
//!
//! One iteration evaluates the current momentum string under a Brownian
//! path, computes the string gradient and steps `p ← p - ε g`. How the path
//! is chosen from iteration to iteration is a [`NoiseSchedule`]:
//!
//! * `"zero"` keeps one path for the whole run and stops once the residual
//!   drops below `tol` — the minimizer of the energy for that realization.
//! * `"finite"` draws a fresh path every iteration and runs exactly `n_s`
//!   iterations; the last `B` iterates sample the string distribution.
//!
//! Ensemble members are independent runs with derived seeds. They execute in
//! parallel and are collected in member order, so results do not depend on
//! the thread count.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{derive_seed, BrownianPath};
use crate::error::{Error, Result};
use crate::kernel::RadialKernel;
use crate::landmark::{
    check_lambda, momentum_residual, string_gradient, LandmarkConfig, LandmarkPath, MomentumPath, StringState,
    Trajectory,
};
use crate::noise::NoiseBasis;
use crate::{Mat2, Vec2};

/// Source, target and model for one landmark matching problem.
#[derive(Debug, Clone)]
pub struct MatchProblem {
    pub source: LandmarkConfig,
    pub target: LandmarkConfig,
    pub lambda: f64,
    pub n_t: usize,
    pub kernel: Arc<dyn RadialKernel>,
    pub basis: NoiseBasis,
}

impl MatchProblem {
    pub fn new(
        source: LandmarkConfig,
        target: LandmarkConfig,
        lambda: f64,
        n_t: usize,
        kernel: Arc<dyn RadialKernel>,
        basis: NoiseBasis,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if n_t < 2 {
            return Err(Error::invalid(format!("n_t must be at least 2, got {n_t}")));
        }
        if source.len() != target.len() {
            return Err(Error::shape(format!(
                "source has {} landmarks, target has {}",
                source.len(),
                target.len()
            )));
        }
        Ok(Self {
            source,
            target,
            lambda,
            n_t,
            kernel,
            basis,
        })
    }

    pub fn n_landmarks(&self) -> usize {
        self.source.len()
    }

    /// The same problem without noise fields.
    pub fn deterministic(&self) -> Self {
        Self {
            basis: NoiseBasis::empty(),
            ..self.clone()
        }
    }

    pub fn with_source(&self, source: LandmarkConfig) -> Self {
        Self {
            source,
            ..self.clone()
        }
    }

    pub fn with_target(&self, target: LandmarkConfig) -> Self {
        Self {
            target,
            ..self.clone()
        }
    }

    pub fn zero_momentum(&self) -> MomentumPath {
        MomentumPath::zeros(self.n_t, self.n_landmarks())
    }

    /// A unit-horizon path with one increment per t-step.
    pub fn path(&self, seed: u64) -> Result<BrownianPath> {
        BrownianPath::unit(seed, self.n_t - 1, self.basis.len())
    }

    pub fn evaluate(&self, momentum: MomentumPath, path: &BrownianPath) -> Result<StringState> {
        StringState::evaluate(
            &self.source,
            momentum,
            &self.target,
            self.lambda,
            self.kernel.as_ref(),
            &self.basis,
            path,
        )
    }
}

/// Step size, stopping rules and sampling window of a string run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Step size `ε` of `p ← p - ε g`.
    pub epsilon: f64,
    /// Iteration cap for schedules that stop on the residual.
    pub max_iters: usize,
    /// Residual (max-norm of the string gradient) at which to stop.
    pub tol: f64,
    /// Iterations of a finite-temperature run.
    pub n_s: usize,
    /// Number of trailing iterates kept per member; `min(200, n_s / 2)` if unset.
    pub window: Option<usize>,
    /// Independent ensemble members.
    pub members: usize,
    pub seed: u64,
    /// Registry name of the noise schedule.
    pub schedule: String,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            max_iters: 5000,
            tol: 1e-6,
            n_s: 500,
            window: None,
            members: 1,
            seed: 0,
            schedule: "zero".into(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::invalid(format!("tol must be non-negative, got {}", self.tol)));
        }
        if self.members == 0 {
            return Err(Error::invalid("members must be at least 1"));
        }
        if self.window == Some(0) {
            return Err(Error::invalid("window must be at least 1"));
        }
        schedule(&self.schedule).map(|_| ())
    }

    pub fn window_len(&self) -> usize {
        self.window.unwrap_or_else(|| (self.n_s / 2).clamp(1, 200))
    }
}

/// How Brownian paths evolve across iterations of a string run.
pub trait NoiseSchedule: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Seed of the unit-horizon path driving iteration `iter` of ensemble
    /// member `member`.
    fn path_seed(&self, seed: u64, member: usize, iter: usize) -> u64;

    /// Maximum number of iterations.
    fn budget(&self, cfg: &OptimizerConfig) -> usize;

    /// Whether a residual below `tol` ends the run.
    fn stops_at_tolerance(&self) -> bool;
}

/// One fixed realization per member; converges to that realization's minimizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroTemperature;

/// A fresh realization every iteration; samples the string distribution.
#[derive(Debug, Clone, Copy, Default)]
pub struct FiniteTemperature;

const ZERO_STREAM: u64 = 0x5a;
const FINITE_STREAM: u64 = 0xf1;

impl NoiseSchedule for ZeroTemperature {
    fn name(&self) -> &'static str {
        "zero"
    }

    fn path_seed(&self, seed: u64, member: usize, _iter: usize) -> u64 {
        if member == 0 {
            seed
        } else {
            derive_seed(seed, ZERO_STREAM, member as u64)
        }
    }

    fn budget(&self, cfg: &OptimizerConfig) -> usize {
        cfg.max_iters
    }

    fn stops_at_tolerance(&self) -> bool {
        true
    }
}

impl NoiseSchedule for FiniteTemperature {
    fn name(&self) -> &'static str {
        "finite"
    }

    fn path_seed(&self, seed: u64, member: usize, iter: usize) -> u64 {
        let member_seed = derive_seed(seed, FINITE_STREAM, member as u64);
        derive_seed(member_seed, FINITE_STREAM, iter as u64)
    }

    fn budget(&self, cfg: &OptimizerConfig) -> usize {
        cfg.n_s
    }

    fn stops_at_tolerance(&self) -> bool {
        false
    }
}

pub type ScheduleFactory = fn() -> Arc<dyn NoiseSchedule>;

pub fn schedule_registry() -> &'static BTreeMap<&'static str, ScheduleFactory> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, ScheduleFactory>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<&'static str, ScheduleFactory> = BTreeMap::new();
        map.insert("zero", || Arc::new(ZeroTemperature));
        map.insert("finite", || Arc::new(FiniteTemperature));
        map
    })
}

pub fn schedule(name: &str) -> Result<Arc<dyn NoiseSchedule>> {
    schedule_registry()
        .get(name)
        .map(|f| f())
        .ok_or_else(|| Error::UnknownStrategy {
            registry: "schedule",
            name: name.to_string(),
            known: schedule_registry().keys().copied().collect::<Vec<_>>().join(", "),
        })
}

/// Result of evaluating a string and taking one step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: StringState,
    pub residual: f64,
    pub next: MomentumPath,
}

/// Evaluates `momentum` under `path` and applies `p ← p - ε g`.
pub fn string_step(
    problem: &MatchProblem,
    momentum: MomentumPath,
    path: &BrownianPath,
    epsilon: f64,
) -> Result<StepOutcome> {
    let state = problem.evaluate(momentum, path)?;
    let g = string_gradient(&state, &problem.target, problem.lambda)?;
    let residual = g.max_norm();
    let next = state.momentum.axpy(-epsilon, &g)?;
    Ok(StepOutcome { state, residual, next })
}

/// One ensemble member's run.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub energy: Vec<f64>,
    pub residual: Vec<f64>,
    pub state: StringState,
    pub path: BrownianPath,
    pub window: Vec<StringState>,
    pub converged: bool,
}

/// Diagnostics and samples of a (possibly ensemble) string run.
#[derive(Debug, Clone)]
pub struct StringRun {
    pub schedule: &'static str,
    /// Per-iteration energy, averaged over members.
    pub energy: Vec<f64>,
    /// Per-iteration residual, averaged over members.
    pub residual: Vec<f64>,
    pub members: Vec<MemberRun>,
    /// Last-`B` trajectories of every member, member-major.
    pub history: Vec<Trajectory>,
    /// Last-`B` momenta, aligned with `history`.
    pub momentum_history: Vec<MomentumPath>,
    pub mean_trajectory: Trajectory,
    pub mean_momentum: MomentumPath,
    /// Zero temperature: every member met `tol`. Finite temperature: the
    /// iteration budget was used up (the schedule's only stopping rule).
    pub converged: bool,
}

impl StringRun {
    /// Final state of the first member.
    pub fn state(&self) -> &StringState {
        &self.members[0].state
    }

    pub fn iterations(&self) -> usize {
        self.energy.len()
    }

    pub fn final_residual(&self) -> f64 {
        self.residual.last().copied().unwrap_or(f64::NAN)
    }

    pub fn endpoints(&self) -> Vec<LandmarkConfig> {
        self.history.iter().map(|t| t.endpoint()).collect()
    }
}

fn run_member(
    problem: &MatchProblem,
    init: &MomentumPath,
    cfg: &OptimizerConfig,
    sched: &dyn NoiseSchedule,
    member: usize,
) -> Result<MemberRun> {
    let budget = sched.budget(cfg).max(1);
    let window_len = cfg.window_len();
    let mut window: VecDeque<StringState> = VecDeque::with_capacity(window_len + 1);
    let mut energy = Vec::new();
    let mut residual = Vec::new();
    let mut momentum = init.clone();
    let mut converged = false;
    let mut last = None;
    for iter in 0..budget {
        let path = problem.path(sched.path_seed(cfg.seed, member, iter))?;
        let out = string_step(problem, momentum, &path, cfg.epsilon)?;
        energy.push(out.state.energy);
        residual.push(out.residual);
        window.push_back(out.state.clone());
        if window.len() > window_len {
            window.pop_front();
        }
        momentum = out.next;
        let done = sched.stops_at_tolerance() && out.residual < cfg.tol;
        last = Some((out.state, path));
        if done {
            converged = true;
            break;
        }
    }
    if !sched.stops_at_tolerance() {
        converged = true;
    }
    let (state, path) = last.expect("budget is at least one iteration");
    Ok(MemberRun {
        energy,
        residual,
        state,
        path,
        window: window.into(),
        converged,
    })
}

/// Runs the string iteration selected by `cfg.schedule` from `init`
/// (zero momentum if `None`).
pub fn run_string(problem: &MatchProblem, init: Option<&MomentumPath>, cfg: &OptimizerConfig) -> Result<StringRun> {
    cfg.validate()?;
    let sched = schedule(&cfg.schedule)?;
    let zero = problem.zero_momentum();
    let init = init.unwrap_or(&zero);
    if init.n_t() != problem.n_t || init.n_landmarks() != problem.n_landmarks() {
        return Err(Error::shape("initial momentum does not match the problem"));
    }
    let members = (0..cfg.members)
        .into_par_iter()
        .map(|m| run_member(problem, init, cfg, sched.as_ref(), m))
        .collect::<Result<Vec<_>>>()?;
    assemble(sched.name(), members)
}

fn assemble(schedule: &'static str, members: Vec<MemberRun>) -> Result<StringRun> {
    let iters = members.iter().map(|m| m.energy.len()).max().unwrap_or(0);
    // members that stopped early hold their last value
    let average = |pick: fn(&MemberRun) -> &Vec<f64>| -> Vec<f64> {
        (0..iters)
            .map(|k| {
                members
                    .iter()
                    .map(|m| {
                        let v = pick(m);
                        v[k.min(v.len() - 1)]
                    })
                    .sum::<f64>()
                    / members.len() as f64
            })
            .collect()
    };
    let energy = average(|m| &m.energy);
    let residual = average(|m| &m.residual);
    let history: Vec<Trajectory> = members
        .iter()
        .flat_map(|m| m.window.iter().map(|s| s.trajectory.clone()))
        .collect();
    let momentum_history: Vec<MomentumPath> = members
        .iter()
        .flat_map(|m| m.window.iter().map(|s| s.momentum.clone()))
        .collect();
    let mean_trajectory = ensemble_average(&history)?;
    let mean_momentum = ensemble_average(&momentum_history)?;
    let converged = members.iter().all(|m| m.converged);
    Ok(StringRun {
        schedule,
        energy,
        residual,
        members,
        history,
        momentum_history,
        mean_trajectory,
        mean_momentum,
        converged,
    })
}

/// Zero-temperature run with one fixed realization seeded by `cfg.seed`.
pub fn run_zero_temperature(
    problem: &MatchProblem,
    init: Option<&MomentumPath>,
    cfg: &OptimizerConfig,
) -> Result<StringRun> {
    run_string(
        problem,
        init,
        &OptimizerConfig {
            schedule: "zero".into(),
            ..cfg.clone()
        },
    )
}

/// Finite-temperature run: `n_s` iterations, fresh noise each time.
pub fn run_finite_temperature(
    problem: &MatchProblem,
    init: Option<&MomentumPath>,
    cfg: &OptimizerConfig,
) -> Result<StringRun> {
    run_string(
        problem,
        init,
        &OptimizerConfig {
            schedule: "finite".into(),
            ..cfg.clone()
        },
    )
}

/// Classic deterministic Beg iteration: the problem without noise fields.
pub fn deterministic_beg(problem: &MatchProblem, init: Option<&MomentumPath>, cfg: &OptimizerConfig) -> Result<StringRun> {
    run_zero_temperature(
        &problem.deterministic(),
        init,
        &OptimizerConfig {
            members: 1,
            ..cfg.clone()
        },
    )
}

/// Pointwise mean of equally shaped paths.
pub fn ensemble_average(paths: &[LandmarkPath]) -> Result<LandmarkPath> {
    let first = paths.first().ok_or(Error::Empty("ensemble"))?;
    let mut acc = LandmarkPath::zeros(first.n_t(), first.n_landmarks());
    for p in paths {
        first.check_same_shape(p)?;
        for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    Ok(acc.scaled(1.0 / paths.len() as f64))
}

/// Per-landmark sample mean and covariance (divisor `n - 1`) of configurations.
pub fn endpoint_statistics(samples: &[LandmarkConfig]) -> Result<(Vec<Vec2>, Vec<Mat2>)> {
    let first = samples.first().ok_or(Error::Empty("endpoint samples"))?;
    let n = first.len();
    if samples.iter().any(|s| s.len() != n) {
        return Err(Error::shape("endpoint samples have different landmark counts"));
    }
    let m = samples.len() as f64;
    let mean: Vec<Vec2> = (0..n)
        .map(|i| samples.iter().map(|s| s.points()[i]).sum::<Vec2>() / m)
        .collect();
    let denom = (m - 1.0).max(1.0);
    let cov = (0..n)
        .map(|i| {
            samples
                .iter()
                .map(|s| {
                    let d = s.points()[i] - mean[i];
                    d * d.transpose()
                })
                .sum::<Mat2>()
                / denom
        })
        .collect();
    Ok((mean, cov))
}

/// Pointwise mean path and covariance of `q_i(t_k)` across `paths`; the
/// covariances are indexed `[k][i]`.
pub fn trajectory_statistics(paths: &[Trajectory]) -> Result<(Trajectory, Vec<Vec<Mat2>>)> {
    let mean = ensemble_average(paths)?;
    let cov = (0..mean.n_t())
        .map(|k| {
            let slice: Vec<LandmarkConfig> = paths.iter().map(|p| p.config_at(k)).collect();
            endpoint_statistics(&slice).map(|(_, c)| c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mean, cov))
}

/// Trace of the sample covariance of `q_i(t_k)` across `paths`, indexed `[i][k]`.
pub fn covariance_traces(paths: &[Trajectory]) -> Result<Vec<Vec<f64>>> {
    let (mean, cov) = trajectory_statistics(paths)?;
    Ok((0..mean.n_landmarks())
        .map(|i| cov.iter().map(|c| c[i].trace()).collect())
        .collect())
}

/// Largest distance between the means of the first and second halves of a
/// sample window: how much the mean string still drifts.
pub fn mean_string_drift(paths: &[Trajectory]) -> Result<f64> {
    if paths.len() < 2 {
        return Err(Error::Empty("need two iterates to measure drift"));
    }
    let half = paths.len() / 2;
    let a = ensemble_average(&paths[..half])?;
    let b = ensemble_average(&paths[half..])?;
    Ok(a.max_distance(&b))
}

/// Residual of a fixed momentum string against a given realization.
pub fn residual_under(problem: &MatchProblem, momentum: &MomentumPath, path: &BrownianPath) -> Result<f64> {
    let state = problem.evaluate(momentum.clone(), path)?;
    momentum_residual(&state, &problem.target, problem.lambda)
}
