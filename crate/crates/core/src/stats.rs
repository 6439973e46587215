//! Shape statistics on top of the landmark model: forward sampling,
//! Fréchet-style template estimation, moment-based noise inference and
//! importance-weighted EM gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brownian::{derive_seed, BrownianPath};
use crate::error::{Error, Result};
use crate::kernel::RadialKernel;
use crate::kernel::make_kernel;
use crate::landmark::{
    hamiltonian_flow, string_gradient, velocity_field, LandmarkConfig, MomentumPath, Trajectory,
};
use crate::noise::NoiseBasis;
use crate::string::{ensemble_average, endpoint_statistics, run_string, schedule, MatchProblem, OptimizerConfig};
use crate::Vec2;
use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

const SAMPLE_STREAM: u64 = 0x5e;
const FRECHET_STREAM: u64 = 0xfe;
const EM_STREAM: u64 = 0xe3;
const MEAN_STREAM: u64 = 0x3a;

/// Generative model: shoot `template` with initial momentum `momentum`
/// through the stochastic Hamiltonian system.
#[derive(Debug, Clone)]
pub struct SampleModel {
    pub template: LandmarkConfig,
    pub momentum: Vec<Vec2>,
    pub kernel: Arc<dyn RadialKernel>,
    pub basis: NoiseBasis,
    /// Integration steps over unit time.
    pub n_steps: usize,
}

impl SampleModel {
    pub fn with_basis(&self, basis: NoiseBasis) -> Self {
        Self { basis, ..self.clone() }
    }

    /// Endpoint of the path seeded by `seed`.
    pub fn endpoint(&self, seed: u64) -> Result<LandmarkConfig> {
        let path = BrownianPath::unit(seed, self.n_steps, self.basis.len())?;
        let (q, _) = hamiltonian_flow(&self.template, &self.momentum, self.kernel.as_ref(), &self.basis, &path)?;
        Ok(q.endpoint())
    }
}

/// `n` independent endpoints of the model; sample `s` uses the sub-seed
/// `derive_seed(seed, ·, s)`, so the draw does not depend on thread count.
pub fn sample_endpoints(model: &SampleModel, n: usize, seed: u64) -> Result<Vec<LandmarkConfig>> {
    (0..n as u64)
        .into_par_iter()
        .map(|s| model.endpoint(derive_seed(seed, SAMPLE_STREAM, s)))
        .collect()
}

/// Per-landmark sample mean.
pub fn mean_configuration(samples: &[LandmarkConfig]) -> Result<LandmarkConfig> {
    let (mean, _) = endpoint_statistics(samples)?;
    LandmarkConfig::new(mean)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::shape("spearman needs two equally long series of length >= 2"));
    }
    let ra = ranks(a);
    let rb = ranks(b);
    Ok(pearson(&ra, &rb))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &i in &idx[start..=end] {
            out[i] = rank;
        }
        start = end + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// How the template moves given the mean initial momentum `p̄(0)` of the
/// matchings to every observation. The matched energy's gradient with
/// respect to the source is `-p(0)`, so both variants are descent steps.
pub trait TemplateUpdate: std::fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(&self, template: &LandmarkConfig, mean_p0: &[Vec2], step: f64, kernel: &dyn RadialKernel) -> Vec<Vec2>;
}

/// `Ī ← Ī + η p̄(0)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentumUpdate;

/// `Ī_i ← Ī_i + η Σ_j K(Ī_i - Ī_j) p̄_j(0)`: moves along the velocity field
/// generated by the mean momentum (a kernel-preconditioned step).
#[derive(Debug, Clone, Copy, Default)]
pub struct VelocityUpdate;

impl TemplateUpdate for MomentumUpdate {
    fn name(&self) -> &'static str {
        "momentum"
    }

    fn apply(&self, template: &LandmarkConfig, mean_p0: &[Vec2], step: f64, _kernel: &dyn RadialKernel) -> Vec<Vec2> {
        template
            .points()
            .iter()
            .zip(mean_p0)
            .map(|(x, p)| x + p * step)
            .collect()
    }
}

impl TemplateUpdate for VelocityUpdate {
    fn name(&self) -> &'static str {
        "velocity"
    }

    fn apply(&self, template: &LandmarkConfig, mean_p0: &[Vec2], step: f64, kernel: &dyn RadialKernel) -> Vec<Vec2> {
        let pts = template.points();
        pts.iter()
            .map(|x| x + velocity_field(pts, mean_p0, kernel, *x) * step)
            .collect()
    }
}

pub type UpdateFactory = fn() -> Arc<dyn TemplateUpdate>;

pub fn update_registry() -> &'static BTreeMap<&'static str, UpdateFactory> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, UpdateFactory>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<&'static str, UpdateFactory> = BTreeMap::new();
        map.insert("momentum", || Arc::new(MomentumUpdate));
        map.insert("velocity", || Arc::new(VelocityUpdate));
        map
    })
}

pub fn template_update(name: &str) -> Result<Arc<dyn TemplateUpdate>> {
    update_registry()
        .get(name)
        .map(|f| f())
        .ok_or_else(|| Error::UnknownStrategy {
            registry: "template update",
            name: name.to_string(),
            known: update_registry().keys().copied().collect::<Vec<_>>().join(", "),
        })
}

/// Outer loop of the template estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrechetConfig {
    pub outer_iters: usize,
    /// Step `η` of the template update.
    pub outer_step: f64,
    /// Stop once the largest template displacement of an update is below this.
    pub tol: f64,
    /// Registry name of the template update.
    pub update: String,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        Self {
            outer_iters: 30,
            outer_step: 0.5,
            tol: 1e-8,
            update: "momentum".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrechetResult {
    pub mean: LandmarkConfig,
    /// Mean matching energy over the observations, per outer iteration.
    pub energy: Vec<f64>,
    /// Largest template displacement of each update.
    pub step_size: Vec<f64>,
    /// Templates before each update and the final one.
    pub templates: Vec<LandmarkConfig>,
    /// Whether every inner matching met its stopping rule in the last outer
    /// iteration.
    pub inner_converged: bool,
}

/// Template estimate minimizing the mean matching energy to `observations`.
///
/// Each outer iteration matches the current template to every observation
/// (warm-started from the previous momenta, fresh noise seeds per outer
/// iteration), averages the initial momenta and moves the template with the
/// configured [`TemplateUpdate`].
pub fn frechet_mean(
    base: &MatchProblem,
    observations: &[LandmarkConfig],
    init: &LandmarkConfig,
    inner: &OptimizerConfig,
    outer: &FrechetConfig,
) -> Result<FrechetResult> {
    if observations.is_empty() {
        return Err(Error::Empty("observations"));
    }
    if observations.iter().any(|o| o.len() != init.len()) {
        return Err(Error::shape("observations and template have different landmark counts"));
    }
    if !(outer.outer_step.is_finite() && outer.outer_step > 0.0) {
        return Err(Error::invalid("outer_step must be positive"));
    }
    let update = template_update(&outer.update)?;
    let mut template = init.clone();
    let mut momenta: Vec<Option<MomentumPath>> = vec![None; observations.len()];
    let mut energy = Vec::new();
    let mut step_size = Vec::new();
    let mut templates = vec![template.clone()];
    let mut inner_converged = true;
    for it in 0..outer.outer_iters {
        let results = observations
            .par_iter()
            .zip(momenta.par_iter())
            .enumerate()
            .map(|(j, (obs, warm))| {
                let problem = base.with_source(template.clone()).with_target(obs.clone());
                let cfg = OptimizerConfig {
                    seed: derive_seed(derive_seed(inner.seed, FRECHET_STREAM, j as u64), FRECHET_STREAM, it as u64),
                    ..inner.clone()
                };
                let run = run_string(&problem, warm.as_ref(), &cfg)?;
                let state = &run.members[0].state;
                Ok((state.energy, state.momentum.clone(), run.converged))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = observations.len() as f64;
        energy.push(results.iter().map(|r| r.0).sum::<f64>() / m);
        inner_converged = results.iter().all(|r| r.2);
        let mean_p0: Vec<Vec2> = (0..template.len())
            .map(|i| results.iter().map(|r| r.1.at(0, i)).sum::<Vec2>() / m)
            .collect();
        for (slot, r) in momenta.iter_mut().zip(results) {
            *slot = Some(r.1);
        }
        let next = LandmarkConfig::new(update.apply(&template, &mean_p0, outer.outer_step, base.kernel.as_ref()))?;
        let step = next.max_distance(&template);
        step_size.push(step);
        template = next;
        templates.push(template.clone());
        if step < outer.tol {
            break;
        }
    }
    Ok(FrechetResult {
        mean: template,
        energy,
        step_size,
        templates,
        inner_converged,
    })
}

/// Mean string from `problem.source` to a set of observations: each
/// observation is matched (zero temperature: the converged strings of all
/// members; finite temperature: the run's window mean) and the resulting
/// trajectories are averaged.
pub fn mean_string(problem: &MatchProblem, observations: &[LandmarkConfig], cfg: &OptimizerConfig) -> Result<Trajectory> {
    if observations.is_empty() {
        return Err(Error::Empty("observations"));
    }
    let converge = schedule(&cfg.schedule)?.stops_at_tolerance();
    let per_obs = observations
        .par_iter()
        .enumerate()
        .map(|(j, obs)| {
            let run = run_string(
                &problem.with_target(obs.clone()),
                None,
                &OptimizerConfig {
                    seed: derive_seed(cfg.seed, MEAN_STREAM, j as u64),
                    ..cfg.clone()
                },
            )?;
            if converge {
                let finals: Vec<Trajectory> = run.members.iter().map(|m| m.state.trajectory.clone()).collect();
                ensemble_average(&finals)
            } else {
                Ok(run.mean_trajectory)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ensemble_average(&per_obs)
}

/// Which model parameter a one-dimensional moment search varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferredParameter {
    /// Scalar multiplier on every noise amplitude.
    Amplitude,
    /// Length scale of every noise field.
    NoiseScale,
    /// Length scale of the velocity kernel.
    KernelScale,
}

/// Search interval and simulation budget for moment matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSpec {
    pub parameter: InferredParameter,
    /// Search interval for the parameter value.
    pub min: f64,
    pub max: f64,
    pub grid: usize,
    /// Golden-section refinements around the best grid point.
    pub refine: usize,
    /// Simulated samples per candidate (the same seeds for every candidate).
    pub n_sim: usize,
    pub seed: u64,
}

impl Default for InferenceSpec {
    fn default() -> Self {
        Self {
            parameter: InferredParameter::Amplitude,
            min: 0.0,
            max: 4.0,
            grid: 25,
            refine: 30,
            n_sim: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub parameter: InferredParameter,
    pub value: f64,
    pub objective: f64,
    /// Every evaluated `(value, objective)`, grid first, then refinements.
    pub evaluations: Vec<(f64, f64)>,
}

/// Per-landmark sample means and covariances.
struct Moments {
    mean: Vec<Vec2>,
    cov: Vec<crate::Mat2>,
}

impl Moments {
    fn of(samples: &[LandmarkConfig]) -> Result<Self> {
        let (mean, cov) = endpoint_statistics(samples)?;
        Ok(Self { mean, cov })
    }
}

/// Squared moment discrepancy, each group scaled by the size of the observed
/// moments so that neither dominates by units alone: mean offsets are
/// measured against the total observed variance, covariance differences
/// against the observed covariances' squared norm.
fn moment_discrepancy(sim: &Moments, obs: &Moments) -> f64 {
    let scale = |v: f64| if v > 0.0 { 1.0 / v } else { 1.0 };
    let var: f64 = obs.cov.iter().map(|c| c.trace()).sum();
    let cov_norm: f64 = obs.cov.iter().map(|c| c.norm_squared()).sum();
    let dmean: f64 = sim.mean.iter().zip(&obs.mean).map(|(a, b)| (a - b).norm_squared()).sum();
    let dcov: f64 = sim.cov.iter().zip(&obs.cov).map(|(a, b)| (a - b).norm_squared()).sum();
    dmean * scale(var) + dcov * scale(cov_norm)
}

impl SampleModel {
    /// The model with `parameter` set to `value`.
    pub fn with_parameter(&self, parameter: InferredParameter, value: f64) -> Result<Self> {
        Ok(match parameter {
            InferredParameter::Amplitude => self.with_basis(self.basis.scaled(value)),
            InferredParameter::NoiseScale => self.with_basis(self.basis.with_scale(value)?),
            InferredParameter::KernelScale => Self {
                kernel: make_kernel(self.kernel.name(), value)?,
                ..self.clone()
            },
        })
    }
}

/// Method-of-moments estimate of one model parameter.
///
/// Minimizes the scaled squared distance between the per-landmark sample
/// means and covariances of `observations` and of `spec.n_sim` simulated
/// endpoints,
/// first over a uniform grid on `[min, max]`, then by golden-section search
/// around the best grid point. Every candidate is simulated with the same
/// seeds (common random numbers), so the objective varies smoothly.
pub fn moment_inference(
    model: &SampleModel,
    observations: &[LandmarkConfig],
    spec: &InferenceSpec,
) -> Result<InferenceResult> {
    if !(spec.min.is_finite() && spec.max.is_finite() && spec.max > spec.min) {
        return Err(Error::invalid(format!(
            "empty search range [{}, {}]",
            spec.min, spec.max
        )));
    }
    if spec.min < 0.0 || (spec.parameter != InferredParameter::Amplitude && spec.min <= 0.0) {
        return Err(Error::invalid("search range must be positive (amplitude may start at 0)"));
    }
    if spec.grid < 2 {
        return Err(Error::invalid("grid needs at least two points"));
    }
    if spec.n_sim < 2 || observations.len() < 2 {
        return Err(Error::invalid("moment matching needs at least two samples on each side"));
    }
    let observed = Moments::of(observations)?;
    let mut evaluations = Vec::new();
    let mut objective = |value: f64| -> Result<f64> {
        let sims = sample_endpoints(&model.with_parameter(spec.parameter, value)?, spec.n_sim, spec.seed)?;
        let f = moment_discrepancy(&Moments::of(&sims)?, &observed);
        evaluations.push((value, f));
        Ok(f)
    };
    let step = (spec.max - spec.min) / (spec.grid - 1) as f64;
    let mut grid = Vec::with_capacity(spec.grid);
    for g in 0..spec.grid {
        let v = spec.min + g as f64 * step;
        grid.push((v, objective(v)?));
    }
    let best = (0..grid.len())
        .min_by(|&a, &b| grid[a].1.total_cmp(&grid[b].1))
        .expect("grid is non-empty");
    let mut lo = grid[best.saturating_sub(1)].0;
    let mut hi = grid[(best + 1).min(grid.len() - 1)].0;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let mut fa = objective(a)?;
    let mut fb = objective(b)?;
    for _ in 0..spec.refine {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = objective(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = objective(b)?;
        }
    }
    let (value, objective_value) = evaluations
        .iter()
        .copied()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("at least one evaluation");
    Ok(InferenceResult {
        parameter: spec.parameter,
        value,
        objective: objective_value,
        evaluations,
    })
}

/// Normalized importance weights `w_m ∝ exp(-|q_m(1) - y|² / (2λ²))`,
/// computed with the log-sum-exp shift.
pub fn em_weights(squared_mismatch: &[f64], lambda: f64) -> Result<Vec<f64>> {
    crate::landmark::check_lambda(lambda)?;
    if squared_mismatch.is_empty() {
        return Err(Error::Empty("EM samples"));
    }
    let logs: Vec<f64> = squared_mismatch
        .iter()
        .map(|d| -d / (2.0 * lambda * lambda))
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::WeightUnderflow {
            samples: squared_mismatch.len(),
        });
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// [`em_weights`] from endpoint configurations and the observed target.
pub fn endpoint_weights(endpoints: &[LandmarkConfig], target: &LandmarkConfig, lambda: f64) -> Result<Vec<f64>> {
    let d: Vec<f64> = endpoints
        .iter()
        .map(|e| {
            e.points()
                .iter()
                .zip(target.points())
                .map(|(a, b)| (a - b).norm_squared())
                .sum()
        })
        .collect();
    em_weights(&d, lambda)
}

/// Weighted and plain averages of the string gradient over sampled paths.
#[derive(Debug, Clone)]
pub struct EmGradient {
    pub weighted: MomentumPath,
    pub unweighted: MomentumPath,
    pub weights: Vec<f64>,
    /// Weighted mean energy.
    pub energy: f64,
}

/// E-step at `momentum`: evaluate `n_paths` realizations, weight them by
/// their endpoint likelihood and average the string gradients.
pub fn em_gradient(problem: &MatchProblem, momentum: &MomentumPath, n_paths: usize, seed: u64) -> Result<EmGradient> {
    if n_paths == 0 {
        return Err(Error::Empty("EM samples"));
    }
    let evals = (0..n_paths as u64)
        .into_par_iter()
        .map(|m| {
            let path = problem.path(derive_seed(seed, EM_STREAM, m))?;
            let state = problem.evaluate(momentum.clone(), &path)?;
            let g = string_gradient(&state, &problem.target, problem.lambda)?;
            let mismatch: f64 = state
                .trajectory
                .slice(problem.n_t - 1)
                .iter()
                .zip(problem.target.points())
                .map(|(q, y)| (q - y).norm_squared())
                .sum();
            Ok((g, mismatch, state.energy))
        })
        .collect::<Result<Vec<_>>>()?;
    let mismatches: Vec<f64> = evals.iter().map(|e| e.1).collect();
    let weights = em_weights(&mismatches, problem.lambda)?;
    let mut weighted = MomentumPath::zeros(problem.n_t, problem.n_landmarks());
    let mut unweighted = weighted.clone();
    let mut energy = 0.0;
    for ((g, _, e), w) in evals.iter().zip(&weights) {
        weighted = weighted.axpy(*w, g)?;
        unweighted = unweighted.axpy(1.0 / n_paths as f64, g)?;
        energy += w * e;
    }
    Ok(EmGradient {
        weighted,
        unweighted,
        weights,
        energy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub iterations: usize,
    pub n_paths: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            n_paths: 64,
            epsilon: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmRun {
    pub momentum: MomentumPath,
    pub energy: Vec<f64>,
    /// Max-norm of the weighted gradient per iteration.
    pub residual: Vec<f64>,
    /// Effective sample size `1 / Σ w²` per iteration.
    pub ess: Vec<f64>,
}

/// `p ← p - ε ĝ` with the importance-weighted gradient, fresh paths each
/// iteration.
pub fn em_step(problem: &MatchProblem, momentum: &MomentumPath, cfg: &EmConfig, iter: usize) -> Result<(MomentumPath, EmGradient)> {
    let grad = em_gradient(problem, momentum, cfg.n_paths, derive_seed(cfg.seed, EM_STREAM, iter as u64))?;
    Ok((momentum.axpy(-cfg.epsilon, &grad.weighted)?, grad))
}

pub fn run_em(problem: &MatchProblem, init: Option<&MomentumPath>, cfg: &EmConfig) -> Result<EmRun> {
    if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let mut momentum = init.cloned().unwrap_or_else(|| problem.zero_momentum());
    let mut energy = Vec::new();
    let mut residual = Vec::new();
    let mut ess = Vec::new();
    for it in 0..cfg.iterations {
        let (next, grad) = em_step(problem, &momentum, cfg, it)?;
        energy.push(grad.energy);
        residual.push(grad.weighted.max_norm());
        ess.push(1.0 / grad.weights.iter().map(|w| w * w).sum::<f64>());
        momentum = next;
    }
    Ok(EmRun {
        momentum,
        energy,
        residual,
        ess,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gaussian;
    use crate::noise::{make_grid_basis, BBox};
    use approx::assert_relative_eq;

    fn basis(a: f64) -> NoiseBasis {
        let bbox = BBox::new([-1.0, -1.0], [1.0, 1.0]);
        let mut b = make_grid_basis(bbox, 3, 0.6, Vec2::new(a, 0.0), "gaussian").unwrap();
        b.extend(make_grid_basis(bbox, 3, 0.6, Vec2::new(0.0, a), "gaussian").unwrap());
        b
    }

    fn model(a: f64) -> SampleModel {
        SampleModel {
            template: LandmarkConfig::from_xy(&[[-0.4, 0.0], [0.4, 0.0], [0.0, 0.4]]).unwrap(),
            momentum: vec![Vec2::zeros(); 3],
            kernel: gaussian(0.5).unwrap(),
            basis: basis(a),
            n_steps: 10,
        }
    }

    #[test]
    fn spearman_values() {
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap(), 1.0);
        assert_relative_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_zero_noise_is_template() {
        let m = model(0.05);
        let a = sample_endpoints(&m, 8, 3).unwrap();
        let b = sample_endpoints(&m, 8, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        let quiet = sample_endpoints(&model(0.0), 3, 3).unwrap();
        assert!(quiet.iter().all(|q| *q == m.template));
    }

    #[test]
    fn em_weights_limits() {
        let w = em_weights(&[0.1, 0.5, 2.0], 1e9).unwrap();
        assert!(w.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-12));
        let w = em_weights(&[0.0, 1.0], 0.1).unwrap();
        assert!(w[0] > 0.999);
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        // extreme mismatch still normalizes thanks to the shift
        let w = em_weights(&[1e6, 1e6 + 1.0], 1e-3).unwrap();
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(em_weights(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn moment_inference_recovers_scale_of_own_samples() {
        let truth = model(0.06);
        let obs = sample_endpoints(&truth, 300, 77).unwrap();
        let reference = model(0.03);
        let spec = InferenceSpec {
            n_sim: 300,
            grid: 12,
            refine: 20,
            ..Default::default()
        };
        let res = moment_inference(&reference, &obs, &spec).unwrap();
        assert_eq!(res.parameter, InferredParameter::Amplitude);
        assert!((res.value - 2.0).abs() < 0.4, "value {}", res.value);
    }

    #[test]
    fn endpoint_weight_ratio_follows_squared_mismatch() {
        let target = LandmarkConfig::from_xy(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        let near = target.translated(Vec2::new(1.0, 0.0));
        let far = target.translated(Vec2::new(2.0, 0.0));
        // squared mismatches 2 and 8, lambda 2: ratio exp((8 - 2) / (2 * 4))
        let w = endpoint_weights(&[near, far], &target, 2.0).unwrap();
        assert_relative_eq!(w[0] / w[1], (0.75f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn template_updates_registered() {
        assert_eq!(template_update("momentum").unwrap().name(), "momentum");
        assert_eq!(template_update("velocity").unwrap().name(), "velocity");
        assert!(template_update("nope").is_err());
        let t = LandmarkConfig::from_xy(&[[0.0, 0.0], [3.0, 0.0]]).unwrap();
        let p = [Vec2::new(1.0, 0.0), Vec2::zeros()];
        let k = gaussian(0.5).unwrap();
        let moved = MomentumUpdate.apply(&t, &p, 0.5, k.as_ref());
        assert_eq!(moved[0], Vec2::new(0.5, 0.0));
        assert_eq!(moved[1], Vec2::new(3.0, 0.0));
    }

    #[test]
    fn frechet_mean_of_identical_observations() {
        let target = LandmarkConfig::from_xy(&[[-0.3, 0.1], [0.5, 0.0], [0.1, 0.5]]).unwrap();
        let init = target.translated(Vec2::new(0.1, -0.05));
        let problem = MatchProblem::new(
            init.clone(),
            target.clone(),
            0.5,
            6,
            gaussian(0.5).unwrap(),
            NoiseBasis::empty(),
        )
        .unwrap();
        let res = frechet_mean(
            &problem,
            &[target.clone(), target.clone()],
            &init,
            &OptimizerConfig {
                tol: 1e-9,
                ..Default::default()
            },
            &FrechetConfig {
                outer_iters: 40,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.mean.max_distance(&target) < 1e-3, "{}", res.mean.max_distance(&target));
        assert!(res.energy.last().unwrap() < &res.energy[0]);
    }
}
