//! Landmark flows under a kernel velocity field and Stratonovich noise.
//!
//! A string is a momentum path `p_i(t_k)` on the uniform grid
//! `t_k = k / (n_t - 1)`. The velocity field at `t_k` is
//! `u_k(x) = Σ_j K(x - q_j(t_k)) p_j(t_k)` and the landmarks follow
//!
//! ```text
//! dq_i = u_t(q_i) dt + Σ_l σ_l(q_i) ∘ dW^l
//! ```
//!
//! discretized with an explicit drift and a Heun predictor–corrector on the
//! noise:
//!
//! ```text
//! x̃       = x_k + Σ_l σ_l(x_k) ΔW^l_k
//! x_{k+1} = x_k + dt u_k(x_k) + ½ Σ_l (σ_l(x_k) + σ_l(x̃)) ΔW^l_k
//! ```
//!
//! `u_k` is only ever evaluated at the landmark positions, which are also
//! its kernel centres. With the kinetic term `Σ_{k < n_t-1} dt ½ l(u_k)` and
//! the exact Jacobian of this step, the string gradient
//! `g = p + λ⁻² Dg_{t,1}^{-T} (q(1) - y)` is the exact gradient of the
//! discrete energy with respect to the velocity field:
//! `∂E/∂p(t_k) = w_k K(q(t_k)) g(t_k)` with centres held fixed.

use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::kernel::RadialKernel;
use crate::noise::NoiseBasis;
use crate::{Mat2, Vec2};

/// Determinant threshold below which a backward Jacobian is degenerate.
pub const DET_GUARD: f64 = 1e-12;

/// `N` landmarks in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkConfig {
    points: Vec<Vec2>,
}

impl LandmarkConfig {
    pub fn new(points: Vec<Vec2>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("no landmarks"));
        }
        if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::invalid("landmark coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn from_xy(xy: &[[f64; 2]]) -> Result<Self> {
        Self::new(xy.iter().map(|&p| Vec2::from(p)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn translated(&self, v: Vec2) -> Self {
        Self {
            points: self.points.iter().map(|p| p + v).collect(),
        }
    }

    pub fn centroid(&self) -> Vec2 {
        self.points.iter().sum::<Vec2>() / self.points.len() as f64
    }

    /// Largest per-landmark Euclidean distance to `other`.
    pub fn max_distance(&self, other: &LandmarkConfig) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Per-time, per-landmark vectors: momenta `p_i(t_k)` or positions `q_i(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPath {
    n_t: usize,
    n: usize,
    data: Vec<Vec2>,
}

pub type MomentumPath = LandmarkPath;
pub type Trajectory = LandmarkPath;

impl LandmarkPath {
    pub fn zeros(n_t: usize, n: usize) -> Self {
        Self {
            n_t,
            n,
            data: vec![Vec2::zeros(); n_t * n],
        }
    }

    /// Every time slice equal to `config`.
    pub fn constant(n_t: usize, config: &LandmarkConfig) -> Self {
        let mut data = Vec::with_capacity(n_t * config.len());
        for _ in 0..n_t {
            data.extend_from_slice(config.points());
        }
        Self {
            n_t,
            n: config.len(),
            data,
        }
    }

    pub fn from_vec(n_t: usize, n: usize, data: Vec<Vec2>) -> Result<Self> {
        if data.len() != n_t * n {
            return Err(Error::shape(format!(
                "path data has {} entries, expected {n_t} x {n}",
                data.len()
            )));
        }
        Ok(Self { n_t, n, data })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_landmarks(&self) -> usize {
        self.n
    }

    pub fn at(&self, k: usize, i: usize) -> Vec2 {
        self.data[k * self.n + i]
    }

    pub fn at_mut(&mut self, k: usize, i: usize) -> &mut Vec2 {
        &mut self.data[k * self.n + i]
    }

    pub fn slice(&self, k: usize) -> &[Vec2] {
        &self.data[k * self.n..(k + 1) * self.n]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [Vec2] {
        &mut self.data[k * self.n..(k + 1) * self.n]
    }

    pub fn data(&self) -> &[Vec2] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vec2] {
        &mut self.data
    }

    /// The slice at `t_k` as a configuration.
    pub fn config_at(&self, k: usize) -> LandmarkConfig {
        LandmarkConfig {
            points: self.slice(k).to_vec(),
        }
    }

    pub fn endpoint(&self) -> LandmarkConfig {
        self.config_at(self.n_t - 1)
    }

    /// Largest Euclidean norm over all entries.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &LandmarkPath) -> Result<LandmarkPath> {
        self.check_same_shape(other)?;
        Ok(LandmarkPath {
            n_t: self.n_t,
            n: self.n,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b * alpha)
                .collect(),
        })
    }

    pub fn scaled(&self, alpha: f64) -> LandmarkPath {
        LandmarkPath {
            n_t: self.n_t,
            n: self.n,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn translated(&self, v: Vec2) -> LandmarkPath {
        LandmarkPath {
            n_t: self.n_t,
            n: self.n,
            data: self.data.iter().map(|p| p + v).collect(),
        }
    }

    /// Largest Euclidean distance between matching entries.
    pub fn max_distance(&self, other: &LandmarkPath) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn check_same_shape(&self, other: &LandmarkPath) -> Result<()> {
        if self.n_t != other.n_t || self.n != other.n {
            return Err(Error::shape(format!(
                "paths {}x{} and {}x{} differ",
                self.n_t, self.n, other.n_t, other.n
            )));
        }
        Ok(())
    }
}

/// Backward Jacobians `Dg_{t_k,1}(q_i(1))`, one 2×2 block per `(k, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    n_t: usize,
    n: usize,
    data: Vec<Mat2>,
}

impl Jacobians {
    pub fn identity(n_t: usize, n: usize) -> Self {
        Self {
            n_t,
            n,
            data: vec![Mat2::identity(); n_t * n],
        }
    }

    pub fn at(&self, k: usize, i: usize) -> Mat2 {
        self.data[k * self.n + i]
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn n_landmarks(&self) -> usize {
        self.n
    }
}

/// A fully evaluated string: momenta, the flow they generate under one noise
/// realization, the backward Jacobians along it, and its energy.
#[derive(Debug, Clone)]
pub struct StringState {
    pub source: LandmarkConfig,
    pub momentum: MomentumPath,
    pub trajectory: Trajectory,
    pub jac: Jacobians,
    pub energy: f64,
}

impl StringState {
    /// Flows `momentum` forward, transports Jacobians back and evaluates the
    /// energy against `target`.
    pub fn evaluate(
        source: &LandmarkConfig,
        momentum: MomentumPath,
        target: &LandmarkConfig,
        lambda: f64,
        kernel: &dyn RadialKernel,
        basis: &NoiseBasis,
        path: &BrownianPath,
    ) -> Result<Self> {
        let trajectory = flow_forward(source, &momentum, kernel, basis, path)?;
        let jac = jacobian_backward(&trajectory, &momentum, kernel, basis, path)?;
        let energy = discrete_energy(&trajectory, &momentum, target, lambda, kernel)?;
        Ok(Self {
            source: source.clone(),
            momentum,
            trajectory,
            jac,
            energy,
        })
    }

    pub fn n_t(&self) -> usize {
        self.momentum.n_t()
    }

    pub fn endpoint(&self) -> LandmarkConfig {
        self.trajectory.endpoint()
    }
}

/// `u(x) = Σ_i K(x - q_i) p_i`.
pub fn velocity_field(q: &[Vec2], p: &[Vec2], kernel: &dyn RadialKernel, x: Vec2) -> Vec2 {
    q.iter()
        .zip(p)
        .fold(Vec2::zeros(), |acc, (qi, pi)| acc + pi * kernel.eval(x - qi))
}

/// `Du(x)^α_γ = Σ_i ∂_γ K(x - q_i) p_i^α`, centres held fixed.
pub fn velocity_jacobian(q: &[Vec2], p: &[Vec2], kernel: &dyn RadialKernel, x: Vec2) -> Mat2 {
    q.iter()
        .zip(p)
        .fold(Mat2::zeros(), |acc, (qi, pi)| acc + kernel.outer_grad(*pi, x - qi))
}

/// `l = Σ_ij p_i·p_j K(q_i - q_j)`, the squared velocity norm.
pub fn lagrangian_value(q: &[Vec2], p: &[Vec2], kernel: &dyn RadialKernel) -> f64 {
    let mut total = 0.0;
    for (i, (qi, pi)) in q.iter().zip(p).enumerate() {
        total += pi.norm_squared();
        for (qj, pj) in q[i + 1..].iter().zip(&p[i + 1..]) {
            total += 2.0 * pi.dot(pj) * kernel.eval(qi - qj);
        }
    }
    total
}

/// Landmark Hamiltonian `H = ½ Σ_ij p_i·p_j K(q_i - q_j)`.
pub fn hamiltonian(q: &[Vec2], p: &[Vec2], kernel: &dyn RadialKernel) -> f64 {
    0.5 * lagrangian_value(q, p, kernel)
}

/// Kinetic quadrature weights: `dt` on every step's left point, zero at `t = 1`.
pub fn kinetic_weights(n_t: usize) -> Vec<f64> {
    let dt = 1.0 / (n_t - 1) as f64;
    (0..n_t).map(|k| if k + 1 < n_t { dt } else { 0.0 }).collect()
}

/// The path aggregated to one increment per t-step, checked against `basis`.
pub(crate) fn steps_for(path: &BrownianPath, n_steps: usize, basis: &NoiseBasis) -> Result<BrownianPath> {
    if path.dim() != basis.len() {
        return Err(Error::shape(format!(
            "Brownian path has {} channels but the noise basis has {} fields",
            path.dim(),
            basis.len()
        )));
    }
    if (path.horizon() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "Brownian path must cover unit time, covers {}",
            path.horizon()
        )));
    }
    path.coarsen(n_steps)
}

fn check_string_shapes(source: &LandmarkConfig, p: &MomentumPath) -> Result<()> {
    if p.n_t() < 2 {
        return Err(Error::invalid("a string needs n_t >= 2"));
    }
    if p.n_landmarks() != source.len() {
        return Err(Error::shape(format!(
            "momentum has {} landmarks, source has {}",
            p.n_landmarks(),
            source.len()
        )));
    }
    Ok(())
}

fn all_finite(points: &[Vec2]) -> bool {
    points.iter().all(|p| p.x.is_finite() && p.y.is_finite())
}

/// Integrates the perturbed reconstruction flow of `p` from `source`.
pub fn flow_forward(
    source: &LandmarkConfig,
    p: &MomentumPath,
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    path: &BrownianPath,
) -> Result<Trajectory> {
    check_string_shapes(source, p)?;
    let n_t = p.n_t();
    let n = source.len();
    let steps = steps_for(path, n_t - 1, basis)?;
    let dt = 1.0 / (n_t - 1) as f64;

    let mut traj = LandmarkPath::constant(n_t, source);
    for k in 0..n_t - 1 {
        let dw = steps.step(k);
        let (head, tail) = traj.data.split_at_mut((k + 1) * n);
        let current = &head[k * n..];
        let next = &mut tail[..n];
        let momenta = p.slice(k);
        for (m, x) in current.iter().enumerate() {
            let drift = velocity_field(current, momenta, kernel, *x);
            let noise = if basis.is_empty() {
                Vec2::zeros()
            } else {
                let s0 = basis.displacement(*x, dw);
                let predictor = x + s0;
                0.5 * (s0 + basis.displacement(predictor, dw))
            };
            next[m] = x + drift * dt + noise;
        }
        if !all_finite(next) {
            return Err(Error::NonFinite {
                context: "flow_forward",
                step: k,
            });
        }
    }
    Ok(traj)
}

/// Jacobians `∂x_{k+1}/∂x_k` of each forward step, `(n_t - 1) × N` blocks.
fn step_jacobians(
    traj: &Trajectory,
    p: &MomentumPath,
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    steps: &BrownianPath,
) -> Vec<Mat2> {
    let n_t = traj.n_t();
    let n = traj.n_landmarks();
    let dt = 1.0 / (n_t - 1) as f64;
    let mut out = Vec::with_capacity((n_t - 1) * n);
    for k in 0..n_t - 1 {
        let dw = steps.step(k);
        let centres = traj.slice(k);
        let momenta = p.slice(k);
        for x in centres {
            let du = velocity_jacobian(centres, momenta, kernel, *x);
            let mut s = Mat2::identity() + du * dt;
            if !basis.is_empty() {
                let m0 = basis.jacobian_increment(*x, dw);
                let predictor = x + basis.displacement(*x, dw);
                let m1 = basis.jacobian_increment(predictor, dw);
                s += 0.5 * (m0 + m1 * (Mat2::identity() + m0));
            }
            out.push(s);
        }
    }
    out
}

/// Backward chain of step Jacobians. Returns `Φ_{k+1→1}` for every `k`
/// (identity for the last two slices) and the full `Φ_{0→1}`.
fn transport_chain(
    traj: &Trajectory,
    p: &MomentumPath,
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    path: &BrownianPath,
) -> Result<(Vec<Mat2>, Vec<Mat2>)> {
    if traj.n_t() != p.n_t() || traj.n_landmarks() != p.n_landmarks() {
        return Err(Error::shape("trajectory and momentum shapes differ"));
    }
    let n_t = traj.n_t();
    let n = traj.n_landmarks();
    let steps = steps_for(path, n_t - 1, basis)?;
    let step_jac = step_jacobians(traj, p, kernel, basis, &steps);

    let mut forward = vec![Mat2::identity(); n_t * n];
    let mut running = vec![Mat2::identity(); n];
    for k in (0..n_t - 1).rev() {
        forward[k * n..(k + 1) * n].copy_from_slice(&running);
        for (i, phi) in running.iter_mut().enumerate() {
            *phi *= step_jac[k * n + i];
        }
        if running.iter().any(|m| !m.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                context: "jacobian_backward",
                step: k,
            });
        }
    }
    Ok((forward, running))
}

fn invert(m: &Mat2, t_index: usize, landmark: usize) -> Result<Mat2> {
    let det = m.determinant();
    if !(det.is_finite() && det.abs() >= DET_GUARD) {
        return Err(Error::DegenerateJacobian {
            t_index,
            landmark,
            det,
        });
    }
    Ok(adjugate(m) / det)
}

fn adjugate(m: &Mat2) -> Mat2 {
    Mat2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)])
}

/// Backward Jacobians `Dg_{t_k,1}(q_i(1))` along a trajectory.
///
/// Chains the exact Jacobians of the forward steps from the identity at
/// `t = 1` backwards, reusing the stored trajectory and the same increments.
/// `Dg_{t_k,1}` is the inverse of the sensitivity of `q_i(1)` to a velocity
/// perturbation at `t_k`; the blocks at the last two grid times are the
/// identity.
pub fn jacobian_backward(
    traj: &Trajectory,
    p: &MomentumPath,
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    path: &BrownianPath,
) -> Result<Jacobians> {
    let (forward, _) = transport_chain(traj, p, kernel, basis, path)?;
    let n = traj.n_landmarks();
    let data = forward
        .iter()
        .enumerate()
        .map(|(idx, phi)| invert(phi, idx / n, idx % n))
        .collect::<Result<Vec<_>>>()?;
    Ok(Jacobians {
        n_t: traj.n_t(),
        n,
        data,
    })
}

/// Spatial derivative of the time-1 flow map at each source landmark.
pub fn flow_map_jacobian(
    traj: &Trajectory,
    p: &MomentumPath,
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    path: &BrownianPath,
) -> Result<Vec<Mat2>> {
    Ok(transport_chain(traj, p, kernel, basis, path)?.1)
}

/// Discrete matching energy
/// `Σ_k w_k ½ l(q(t_k), p(t_k)) + 1/(2λ²) Σ_i |q_i(1) - y_i|²`.
pub fn discrete_energy(
    traj: &Trajectory,
    p: &MomentumPath,
    target: &LandmarkConfig,
    lambda: f64,
    kernel: &dyn RadialKernel,
) -> Result<f64> {
    check_lambda(lambda)?;
    traj.check_same_shape(p)?;
    if target.len() != traj.n_landmarks() {
        return Err(Error::shape("target and trajectory landmark counts differ"));
    }
    let kinetic: f64 = kinetic_weights(p.n_t())
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(k, w)| w * 0.5 * lagrangian_value(traj.slice(k), p.slice(k), kernel))
        .sum();
    Ok(kinetic + mismatch(&traj.endpoint(), target, lambda))
}

/// `1/(2λ²) Σ_i |a_i - b_i|²`.
pub fn mismatch(a: &LandmarkConfig, b: &LandmarkConfig, lambda: f64) -> f64 {
    let ssd: f64 = a
        .points()
        .iter()
        .zip(b.points())
        .map(|(x, y)| (x - y).norm_squared())
        .sum();
    ssd / (2.0 * lambda * lambda)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("lambda must be positive, got {lambda}")))
    }
}

/// Energy of an evaluated string against `target`.
pub fn matching_energy(
    state: &StringState,
    target: &LandmarkConfig,
    lambda: f64,
    kernel: &dyn RadialKernel,
) -> Result<f64> {
    discrete_energy(&state.trajectory, &state.momentum, target, lambda, kernel)
}

/// `g_i(t_k) = p_i(t_k) + λ⁻² Dg_{t_k,1}(q_i(1))^{-T} (q_i(1) - y_i)`.
///
/// The string update is `p ← p - ε g`.
pub fn string_gradient(
    state: &StringState,
    target: &LandmarkConfig,
    lambda: f64,
) -> Result<MomentumPath> {
    check_lambda(lambda)?;
    let n = state.momentum.n_landmarks();
    if target.len() != n {
        return Err(Error::shape("target and string landmark counts differ"));
    }
    let end = state.trajectory.slice(state.n_t() - 1);
    let inv_l2 = 1.0 / (lambda * lambda);
    let mut g = state.momentum.clone();
    for k in 0..state.n_t() {
        for i in 0..n {
            let jac = state.jac.at(k, i);
            let det = jac.determinant();
            if !(det.is_finite() && det.abs() >= DET_GUARD) {
                return Err(Error::DegenerateJacobian {
                    t_index: k,
                    landmark: i,
                    det,
                });
            }
            // (J^{-1})^T = adj(J)^T / det
            let inv_t = adjugate(&jac).transpose() / det;
            let residual = end[i] - target.points()[i];
            *g.at_mut(k, i) += inv_t * residual * inv_l2;
        }
    }
    Ok(g)
}

/// Max-norm of the string gradient: zero exactly at fixed points.
pub fn momentum_residual(state: &StringState, target: &LandmarkConfig, lambda: f64) -> Result<f64> {
    Ok(string_gradient(state, target, lambda)?.max_norm())
}

/// Gradient of the matched energy with respect to the source landmarks
/// (velocity field held fixed): `λ⁻² Φ_{0→1}^T (q(1) - y)`.
///
/// At a converged string this equals `-S_0^T p(0)`, i.e. `-p(0)` up to one
/// step's Jacobian.
pub fn source_gradient(
    state: &StringState,
    target: &LandmarkConfig,
    lambda: f64,
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    path: &BrownianPath,
) -> Result<Vec<Vec2>> {
    check_lambda(lambda)?;
    let full = flow_map_jacobian(&state.trajectory, &state.momentum, kernel, basis, path)?;
    let end = state.trajectory.slice(state.n_t() - 1);
    Ok(full
        .iter()
        .zip(end)
        .zip(target.points())
        .map(|((phi, q1), y)| phi.transpose() * (q1 - y) / (lambda * lambda))
        .collect())
}

/// Stochastic landmark Hamiltonian system
///
/// ```text
/// dq_i = Σ_j K(q_i - q_j) p_j dt + Σ_l σ_l(q_i) ∘ dW^l
/// dp_i = -Σ_j (p_i·p_j) ∇K(q_i - q_j) dt - Σ_l Dσ_l(q_i)^T p_i ∘ dW^l
/// ```
///
/// integrated with the stochastic Heun scheme over the steps of `path`.
/// Returns `(q, p)` on `path.n_steps() + 1` grid times.
pub fn hamiltonian_flow(
    q0: &LandmarkConfig,
    p0: &[Vec2],
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    path: &BrownianPath,
) -> Result<(Trajectory, MomentumPath)> {
    if p0.len() != q0.len() {
        return Err(Error::shape(format!(
            "{} momenta for {} landmarks",
            p0.len(),
            q0.len()
        )));
    }
    if path.dim() != basis.len() {
        return Err(Error::shape(format!(
            "Brownian path has {} channels but the noise basis has {} fields",
            path.dim(),
            basis.len()
        )));
    }
    let n = q0.len();
    let n_steps = path.n_steps();
    let dt = path.dt();
    let mut qs = LandmarkPath::zeros(n_steps + 1, n);
    let mut ps = LandmarkPath::zeros(n_steps + 1, n);
    qs.slice_mut(0).copy_from_slice(q0.points());
    ps.slice_mut(0).copy_from_slice(p0);

    let mut q = q0.points().to_vec();
    let mut p = p0.to_vec();
    let mut dq = vec![Vec2::zeros(); n];
    let mut dp = vec![Vec2::zeros(); n];
    let mut dq2 = vec![Vec2::zeros(); n];
    let mut dp2 = vec![Vec2::zeros(); n];
    let mut q_pred = vec![Vec2::zeros(); n];
    let mut p_pred = vec![Vec2::zeros(); n];
    for k in 0..n_steps {
        let dw = path.step(k);
        hamiltonian_increment(&q, &p, kernel, basis, dt, dw, &mut dq, &mut dp);
        for i in 0..n {
            q_pred[i] = q[i] + dq[i];
            p_pred[i] = p[i] + dp[i];
        }
        hamiltonian_increment(&q_pred, &p_pred, kernel, basis, dt, dw, &mut dq2, &mut dp2);
        for i in 0..n {
            q[i] += 0.5 * (dq[i] + dq2[i]);
            p[i] += 0.5 * (dp[i] + dp2[i]);
        }
        if !(all_finite(&q) && all_finite(&p)) {
            return Err(Error::NonFinite {
                context: "hamiltonian_flow",
                step: k,
            });
        }
        qs.slice_mut(k + 1).copy_from_slice(&q);
        ps.slice_mut(k + 1).copy_from_slice(&p);
    }
    Ok((qs, ps))
}

/// Drift times `dt` plus noise increments of the Hamiltonian system.
#[allow(clippy::too_many_arguments)]
fn hamiltonian_increment(
    q: &[Vec2],
    p: &[Vec2],
    kernel: &dyn RadialKernel,
    basis: &NoiseBasis,
    dt: f64,
    dw: &[f64],
    dq: &mut [Vec2],
    dp: &mut [Vec2],
) {
    for i in 0..q.len() {
        let mut vq = Vec2::zeros();
        let mut vp = Vec2::zeros();
        for j in 0..q.len() {
            let d = q[i] - q[j];
            vq += p[j] * kernel.eval(d);
            if i != j {
                vp -= kernel.grad(d) * p[i].dot(&p[j]);
            }
        }
        dq[i] = vq * dt;
        dp[i] = vp * dt;
        if !basis.is_empty() {
            dq[i] += basis.displacement(q[i], dw);
            dp[i] -= basis.momentum_increment(q[i], p[i], dw);
        }
    }
}
