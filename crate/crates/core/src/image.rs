//! Image matching on a pixel grid.
//!
//! Images are scalar fields on an `nx × ny` grid in pixel coordinates
//! (`x ∈ [0, nx-1]`, `y ∈ [0, ny-1]`), stored row-major as `[i + nx * j]`.
//! A string is a sequence of momentum fields `m_k`; the velocities are
//! `u_k = K m_k` with `K` a truncated, normalized Gaussian convolution.
//!
//! Transport is semi-Lagrangian. With `s_k(x) = Σ_l σ_l(x) ΔW^l_k` and the
//! forward step `F_k(x) = x + dt u_k(x) + ½ (s_k(x) + s_k(x + s_k(x)))`:
//!
//! * inverse maps (time `t_k` back to 0): `φ_0 = id`, `φ_{k+1}(x) = φ_k(y)`
//!   with `y` a Heun backtrace of `x` through step `k`;
//! * backward maps (time `t_k` forward to 1): `ψ_N = id`, `ψ_k(x) = ψ_{k+1}(F_k(x))`.
//!
//! The string update is
//!
//! ```text
//! m_k ← m_k + ε (-2 m_k + 2/λ² |det Dψ_k| (J0_k - J1_k) ∇J0_k)
//! J0_k = I0 ∘ φ_k,   J1_k = I1 ∘ ψ_k
//! ```
//!
//! i.e. `u ← u - ε (2u - K(...))`, the gradient of
//! `E = Σ_{k<N} dt ⟨u_k, m_k⟩ + 1/λ² ‖I0 ∘ φ_N - I1‖²`.

use serde::{Deserialize, Serialize};

use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::kernel::{BSplineKernel, RadialKernel};
use crate::string::schedule;
use crate::Vec2;

fn check_dims(nx: usize, ny: usize) -> Result<()> {
    if nx < 2 || ny < 2 {
        return Err(Error::invalid(format!("grid must be at least 2x2, got {nx}x{ny}")));
    }
    Ok(())
}

/// Bilinear weights of `(x, y)` after clamping into the grid.
#[inline]
fn bilinear(nx: usize, ny: usize, x: f64, y: f64) -> ([usize; 4], [f64; 4]) {
    let xc = x.clamp(0.0, (nx - 1) as f64);
    let yc = y.clamp(0.0, (ny - 1) as f64);
    let i0 = (xc.floor() as usize).min(nx - 2);
    let j0 = (yc.floor() as usize).min(ny - 2);
    let fx = xc - i0 as f64;
    let fy = yc - j0 as f64;
    let base = i0 + nx * j0;
    (
        [base, base + 1, base + nx, base + nx + 1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    )
}

/// Scalar field on the grid, intensities typically in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageField {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl ImageField {
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(nx, ny)?;
        if data.len() != nx * ny {
            return Err(Error::shape(format!("{} pixels for a {nx}x{ny} image", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image intensities must be finite"));
        }
        Ok(Self { nx, ny, data })
    }

    pub fn zeros(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, vec![0.0; nx * ny])
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let data = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| f(i as f64, j as f64))
            .collect();
        Self::new(nx, ny, data)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.nx * j]
    }

    /// Bilinear interpolation with clamped coordinates.
    pub fn sample(&self, p: Vec2) -> f64 {
        let (idx, w) = bilinear(self.nx, self.ny, p.x, p.y);
        idx.iter().zip(w).map(|(&k, w)| self.data[k] * w).sum()
    }

    pub fn same_grid(&self, other: &ImageField) -> Result<()> {
        if self.nx != other.nx || self.ny != other.ny {
            return Err(Error::shape(format!(
                "images {}x{} and {}x{} differ",
                self.nx, self.ny, other.nx, other.ny
            )));
        }
        Ok(())
    }

    /// Sum of squared differences.
    pub fn ssd(&self, other: &ImageField) -> Result<f64> {
        self.same_grid(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Vector field on the grid (velocities, momenta, displacement-free maps).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    nx: usize,
    ny: usize,
    data: Vec<Vec2>,
}

/// A map stored by its values at the pixel centres.
pub type MapField = VectorField;

impl VectorField {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: vec![Vec2::zeros(); nx * ny],
        }
    }

    pub fn from_vec(nx: usize, ny: usize, data: Vec<Vec2>) -> Result<Self> {
        check_dims(nx, ny)?;
        if data.len() != nx * ny {
            return Err(Error::shape(format!("{} vectors for a {nx}x{ny} grid", data.len())));
        }
        Ok(Self { nx, ny, data })
    }

    /// The identity map `x ↦ x`.
    pub fn identity(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: (0..ny)
                .flat_map(|j| (0..nx).map(move |i| Vec2::new(i as f64, j as f64)))
                .collect(),
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn data(&self) -> &[Vec2] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vec2] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Vec2 {
        self.data[i + self.nx * j]
    }

    /// Bilinear interpolation of the field values.
    pub fn sample(&self, p: Vec2) -> Vec2 {
        let (idx, w) = bilinear(self.nx, self.ny, p.x, p.y);
        idx.iter().zip(w).fold(Vec2::zeros(), |acc, (&k, w)| acc + self.data[k] * w)
    }

    /// Evaluates the field as a map: interpolates the displacement from the
    /// identity, so that `identity().sample_map(p) == p` everywhere.
    pub fn sample_map(&self, p: Vec2) -> Vec2 {
        let (idx, w) = bilinear(self.nx, self.ny, p.x, p.y);
        let nx = self.nx;
        p + idx.iter().zip(w).fold(Vec2::zeros(), |acc, (&k, w)| {
            let grid = Vec2::new((k % nx) as f64, (k / nx) as f64);
            acc + (self.data[k] - grid) * w
        })
    }

    /// `⟨a, b⟩ = Σ_pixels a·b`.
    pub fn dot(&self, other: &VectorField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_distance(&self, other: &VectorField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Spatial gradient: central differences inside, one-sided at the border.
pub fn image_gradient(img: &ImageField) -> VectorField {
    let (nx, ny) = (img.nx, img.ny);
    let d = |lo: f64, hi: f64, span: f64| (hi - lo) / span;
    let mut out = VectorField::zeros(nx, ny);
    for j in 0..ny {
        for i in 0..nx {
            let (il, ih) = (i.saturating_sub(1), (i + 1).min(nx - 1));
            let (jl, jh) = (j.saturating_sub(1), (j + 1).min(ny - 1));
            out.data[i + nx * j] = Vec2::new(
                d(img.get(il, j), img.get(ih, j), (ih - il) as f64),
                d(img.get(i, jl), img.get(i, jh), (jh - jl) as f64),
            );
        }
    }
    out
}

/// Normalized Gaussian taps `exp(-d²/(2r²))`, `|d| <= ceil(4r)`.
pub fn gaussian_taps(r: f64) -> Result<Vec<f64>> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid(format!("kernel scale must be positive, got {r}")));
    }
    let half = (4.0 * r).ceil() as i64;
    let raw: Vec<f64> = (-half..=half)
        .map(|d| (-0.5 * (d * d) as f64 / (r * r)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// `u = K m`: separable Gaussian convolution with clamped boundaries.
pub fn apply_green_kernel(m: &VectorField, taps: &[f64]) -> VectorField {
    let (nx, ny) = (m.nx, m.ny);
    let half = (taps.len() / 2) as i64;
    let mut tmp = VectorField::zeros(nx, ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = Vec2::zeros();
            for (t, w) in taps.iter().enumerate() {
                let ii = (i as i64 + t as i64 - half).clamp(0, nx as i64 - 1) as usize;
                acc += m.data[ii + nx * j] * *w;
            }
            tmp.data[i + nx * j] = acc;
        }
    }
    let mut out = VectorField::zeros(nx, ny);
    for j in 0..ny {
        for i in 0..nx {
            let mut acc = Vec2::zeros();
            for (t, w) in taps.iter().enumerate() {
                let jj = (j as i64 + t as i64 - half).clamp(0, ny as i64 - 1) as usize;
                acc += tmp.data[i + nx * jj] * *w;
            }
            out.data[i + nx * j] = acc;
        }
    }
    out
}

/// Noise fields on an `n × n` grid of cubic B-spline bumps covering the
/// image, two directions per centre. Each bump is divided by the sum of all
/// bumps at that point, so the fields form a partition of unity.
#[derive(Debug, Clone)]
pub struct ImageNoise {
    nx: usize,
    ny: usize,
    amplitude: f64,
    fields: Vec<VectorField>,
}

impl ImageNoise {
    pub fn empty(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            amplitude: 0.0,
            fields: Vec::new(),
        }
    }

    /// `n_per_axis²` centres at cell midpoints of the pixel domain
    /// `[-½, nx-½] × [-½, ny-½]`; B-spline scale equal to the cell size.
    /// Amplitude in pixels.
    pub fn grid(nx: usize, ny: usize, n_per_axis: usize, amplitude: f64) -> Result<Self> {
        check_dims(nx, ny)?;
        if n_per_axis == 0 {
            return Err(Error::invalid("noise grid needs at least one centre per axis"));
        }
        if !amplitude.is_finite() {
            return Err(Error::invalid("noise amplitude must be finite"));
        }
        let cx = nx as f64 / n_per_axis as f64;
        let cy = ny as f64 / n_per_axis as f64;
        let kernel = BSplineKernel::new(cx.max(cy))?;
        let centres: Vec<Vec2> = (0..n_per_axis)
            .flat_map(|b| (0..n_per_axis).map(move |a| (a, b)))
            .map(|(a, b)| Vec2::new(-0.5 + (a as f64 + 0.5) * cx, -0.5 + (b as f64 + 0.5) * cy))
            .collect();
        let pixels = VectorField::identity(nx, ny);
        let bumps: Vec<Vec<f64>> = centres
            .iter()
            .map(|c| pixels.data.iter().map(|x| kernel.eval(x - c)).collect())
            .collect();
        let total: Vec<f64> = (0..nx * ny).map(|p| bumps.iter().map(|b| b[p]).sum()).collect();
        let mut fields = Vec::with_capacity(2 * centres.len());
        for bump in &bumps {
            for dir in [Vec2::new(amplitude, 0.0), Vec2::new(0.0, amplitude)] {
                let data = bump
                    .iter()
                    .zip(&total)
                    .map(|(b, t)| if *t > 0.0 { dir * (b / t) } else { Vec2::zeros() })
                    .collect();
                fields.push(VectorField { nx, ny, data });
            }
        }
        Ok(Self {
            nx,
            ny,
            amplitude,
            fields,
        })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn fields(&self) -> &[VectorField] {
        &self.fields
    }

    /// `Σ_l σ_l ΔW^l` on the grid.
    pub fn realization(&self, dw: &[f64]) -> VectorField {
        let mut out = VectorField::zeros(self.nx, self.ny);
        for (f, w) in self.fields.iter().zip(dw) {
            if *w != 0.0 {
                for (o, v) in out.data.iter_mut().zip(&f.data) {
                    *o += v * *w;
                }
            }
        }
        out
    }
}

/// Momentum fields `m_k` and velocities `u_k = K m_k` for `k = 0..n_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityString {
    pub momentum: Vec<VectorField>,
    pub velocity: Vec<VectorField>,
}

impl VelocityString {
    pub fn zeros(n_t: usize, nx: usize, ny: usize) -> Self {
        Self {
            momentum: vec![VectorField::zeros(nx, ny); n_t],
            velocity: vec![VectorField::zeros(nx, ny); n_t],
        }
    }

    pub fn n_t(&self) -> usize {
        self.velocity.len()
    }

    /// `Σ_{k<N} dt ⟨u_k, m_k⟩`.
    pub fn kinetic(&self) -> f64 {
        let n_t = self.n_t();
        let dt = 1.0 / (n_t - 1) as f64;
        (0..n_t - 1)
            .map(|k| dt * self.velocity[k].dot(&self.momentum[k]))
            .sum()
    }
}

/// Inverse maps `φ_k` (to time 0) and backward maps `ψ_k` (to time 1).
#[derive(Debug, Clone)]
pub struct FlowMaps {
    pub inverse: Vec<MapField>,
    pub backward: Vec<MapField>,
}

fn noise_steps(noise: &ImageNoise, path: &BrownianPath, n_t: usize) -> Result<Vec<VectorField>> {
    if path.dim() != noise.len() {
        return Err(Error::shape(format!(
            "Brownian path has {} channels but the image noise has {} fields",
            path.dim(),
            noise.len()
        )));
    }
    if (path.horizon() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("Brownian path must cover unit time"));
    }
    let steps = path.coarsen(n_t - 1)?;
    Ok((0..n_t - 1).map(|k| noise.realization(steps.step(k))).collect())
}

/// Integrates the inverse and backward maps of a velocity string under one
/// noise realization (`None` for the deterministic flow).
pub fn integrate_maps(v: &VelocityString, noise: Option<(&ImageNoise, &BrownianPath)>) -> Result<FlowMaps> {
    let n_t = v.n_t();
    if n_t < 2 {
        return Err(Error::invalid("a string needs n_t >= 2"));
    }
    let (nx, ny) = (v.velocity[0].nx, v.velocity[0].ny);
    let dt = 1.0 / (n_t - 1) as f64;
    let noise_fields = match noise {
        Some((n, p)) if !n.is_empty() => Some(noise_steps(n, p, n_t)?),
        _ => None,
    };
    let displacement = |k: usize, x: Vec2| -> Vec2 {
        let drift = v.velocity[k].sample(x) * dt;
        match &noise_fields {
            Some(s) => drift + s[k].sample(x),
            None => drift,
        }
    };
    let forward = |k: usize, x: Vec2| -> Vec2 {
        let drift = v.velocity[k].sample(x) * dt;
        match &noise_fields {
            Some(s) => {
                let s0 = s[k].sample(x);
                x + drift + 0.5 * (s0 + s[k].sample(x + s0))
            }
            None => x + drift,
        }
    };
    let grid = VectorField::identity(nx, ny);

    let mut inverse = Vec::with_capacity(n_t);
    inverse.push(grid.clone());
    for k in 0..n_t - 1 {
        let prev = &inverse[k];
        let data = grid
            .data
            .iter()
            .map(|&x| {
                let d0 = displacement(k, x);
                let y = x - 0.5 * (d0 + displacement(k, x - d0));
                prev.sample_map(y)
            })
            .collect::<Vec<_>>();
        if data.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::NonFinite {
                context: "integrate_maps",
                step: k,
            });
        }
        inverse.push(VectorField { nx, ny, data });
    }

    let mut backward = vec![grid.clone(); n_t];
    for k in (0..n_t - 1).rev() {
        let data = grid
            .data
            .iter()
            .map(|&x| backward[k + 1].sample_map(forward(k, x)))
            .collect::<Vec<_>>();
        if data.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::NonFinite {
                context: "integrate_maps",
                step: k,
            });
        }
        backward[k] = VectorField { nx, ny, data };
    }
    Ok(FlowMaps { inverse, backward })
}

/// `img ∘ map`.
pub fn warp_image(img: &ImageField, map: &MapField) -> Result<ImageField> {
    if img.nx != map.nx || img.ny != map.ny {
        return Err(Error::shape("image and map grids differ"));
    }
    Ok(ImageField {
        nx: img.nx,
        ny: img.ny,
        data: map.data.iter().map(|p| img.sample(*p)).collect(),
    })
}

/// `|det Dmap|` by finite differences (central inside, one-sided at edges).
pub fn map_jacobian_det(map: &MapField) -> ImageField {
    let (nx, ny) = (map.nx, map.ny);
    let mut data = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let (il, ih) = (i.saturating_sub(1), (i + 1).min(nx - 1));
            let (jl, jh) = (j.saturating_sub(1), (j + 1).min(ny - 1));
            let dx = (map.get(ih, j) - map.get(il, j)) / (ih - il) as f64;
            let dy = (map.get(i, jh) - map.get(i, jl)) / (jh - jl) as f64;
            data[i + nx * j] = (dx.x * dy.y - dx.y * dy.x).abs();
        }
    }
    ImageField { nx, ny, data }
}

/// Source, target and model of an image matching problem.
#[derive(Debug, Clone)]
pub struct ImageProblem {
    pub source: ImageField,
    pub target: ImageField,
    pub lambda: f64,
    pub n_t: usize,
    /// Gaussian scale of `K` in pixels.
    pub kernel_scale: f64,
    pub noise: ImageNoise,
    taps: Vec<f64>,
}

impl ImageProblem {
    pub fn new(
        source: ImageField,
        target: ImageField,
        lambda: f64,
        n_t: usize,
        kernel_scale: f64,
        noise: ImageNoise,
    ) -> Result<Self> {
        source.same_grid(&target)?;
        crate::landmark::check_lambda(lambda)?;
        if n_t < 2 {
            return Err(Error::invalid(format!("n_t must be at least 2, got {n_t}")));
        }
        if !noise.is_empty() && (noise.nx != source.nx || noise.ny != source.ny) {
            return Err(Error::shape("noise and image grids differ"));
        }
        let taps = gaussian_taps(kernel_scale)?;
        Ok(Self {
            source,
            target,
            lambda,
            n_t,
            kernel_scale,
            noise,
            taps,
        })
    }

    pub fn nx(&self) -> usize {
        self.source.nx
    }

    pub fn ny(&self) -> usize {
        self.source.ny
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn path(&self, seed: u64) -> Result<BrownianPath> {
        BrownianPath::unit(seed, self.n_t - 1, self.noise.len())
    }
}

/// One evaluated image string.
#[derive(Debug, Clone)]
pub struct ImageState {
    pub maps: FlowMaps,
    /// `I0 ∘ φ_N`.
    pub deformed: ImageField,
    pub ssd: f64,
    pub energy: f64,
    /// Largest momentum change of the update that followed.
    pub update: f64,
}

/// Evaluates `v` under `path` and applies one string update in place.
pub fn image_string_step(
    problem: &ImageProblem,
    v: &mut VelocityString,
    path: &BrownianPath,
    epsilon: f64,
) -> Result<ImageState> {
    let n_t = problem.n_t;
    if v.n_t() != n_t {
        return Err(Error::shape("velocity string length differs from n_t"));
    }
    let maps = integrate_maps(v, Some((&problem.noise, path)))?;
    let deformed = warp_image(&problem.source, &maps.inverse[n_t - 1])?;
    let ssd = deformed.ssd(&problem.target)?;
    let energy = v.kinetic() + ssd / (problem.lambda * problem.lambda);
    let coef = 2.0 / (problem.lambda * problem.lambda);
    let mut update: f64 = 0.0;
    for k in 0..n_t {
        let j0 = warp_image(&problem.source, &maps.inverse[k])?;
        let j1 = warp_image(&problem.target, &maps.backward[k])?;
        let grad = image_gradient(&j0);
        let det = map_jacobian_det(&maps.backward[k]);
        let m = &mut v.momentum[k];
        for (p, mv) in m.data.iter_mut().enumerate() {
            let force = grad.data[p] * (coef * det.data[p] * (j0.data[p] - j1.data[p]));
            let dm = (force - 2.0 * *mv) * epsilon;
            update = update.max(dm.norm());
            *mv += dm;
        }
        v.velocity[k] = apply_green_kernel(m, &problem.taps);
    }
    Ok(ImageState {
        maps,
        deformed,
        ssd,
        energy,
        update,
    })
}

/// Settings of an image string run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageRunConfig {
    pub epsilon: f64,
    pub iterations: usize,
    /// Zero temperature stops once no momentum entry moves by more than this.
    pub tol: f64,
    pub seed: u64,
    pub schedule: String,
}

impl Default for ImageRunConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            iterations: 100,
            tol: 1e-12,
            seed: 0,
            schedule: "zero".into(),
        }
    }
}

/// Diagnostics of an image string run.
#[derive(Debug, Clone)]
pub struct ImageRun {
    pub energy: Vec<f64>,
    pub ssd: Vec<f64>,
    pub initial_ssd: f64,
    pub string: VelocityString,
    /// Deformed source of the last evaluated iterate.
    pub deformed: ImageField,
}

impl ImageRun {
    /// Relative SSD reduction of the last iterate.
    pub fn reduction(&self) -> f64 {
        if self.initial_ssd == 0.0 {
            return 0.0;
        }
        1.0 - self.ssd.last().copied().unwrap_or(self.initial_ssd) / self.initial_ssd
    }
}

/// Runs up to `cfg.iterations` image string updates from zero velocity.
pub fn run_image_matching(problem: &ImageProblem, cfg: &ImageRunConfig) -> Result<ImageRun> {
    if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let sched = schedule(&cfg.schedule)?;
    let mut v = VelocityString::zeros(problem.n_t, problem.nx(), problem.ny());
    let initial_ssd = problem.source.ssd(&problem.target)?;
    let mut energy = Vec::with_capacity(cfg.iterations);
    let mut ssd = Vec::with_capacity(cfg.iterations);
    let mut deformed = problem.source.clone();
    for iter in 0..cfg.iterations {
        let path = problem.path(sched.path_seed(cfg.seed, 0, iter))?;
        let state = image_string_step(problem, &mut v, &path, cfg.epsilon)?;
        energy.push(state.energy);
        ssd.push(state.ssd);
        deformed = state.deformed;
        if sched.stops_at_tolerance() && state.update <= cfg.tol {
            break;
        }
    }
    Ok(ImageRun {
        energy,
        ssd,
        initial_ssd,
        string: v,
        deformed,
    })
}

/// Cumulative means of `values[start..]`.
pub fn running_mean(values: &[f64], start: usize) -> Vec<f64> {
    let mut sum = 0.0;
    values[start.min(values.len())..]
        .iter()
        .enumerate()
        .map(|(n, v)| {
            sum += v;
            sum / (n + 1) as f64
        })
        .collect()
}

/// Filled triangle with `ss × ss` supersampling per pixel (coverage in `[0, 1]`).
pub fn triangle_image(nx: usize, ny: usize, vertices: [[f64; 2]; 3], ss: usize) -> Result<ImageField> {
    let ss = ss.max(1);
    let [a, b, c] = vertices.map(Vec2::from);
    let cross = |o: Vec2, p: Vec2, q: Vec2| (p.x - o.x) * (q.y - o.y) - (p.y - o.y) * (q.x - o.x);
    let area = cross(a, b, c);
    if area == 0.0 {
        return Err(Error::invalid("degenerate triangle"));
    }
    let inside = |p: Vec2| {
        let s = area.signum();
        cross(a, b, p) * s >= 0.0 && cross(b, c, p) * s >= 0.0 && cross(c, a, p) * s >= 0.0
    };
    ImageField::from_fn(nx, ny, |x, y| {
        let mut hits = 0usize;
        for sj in 0..ss {
            for si in 0..ss {
                let p = Vec2::new(
                    x - 0.5 + (si as f64 + 0.5) / ss as f64,
                    y - 0.5 + (sj as f64 + 0.5) / ss as f64,
                );
                hits += inside(p) as usize;
            }
        }
        hits as f64 / (ss * ss) as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::Mat2;

    #[test]
    fn bilinear_reproduces_linear_functions() {
        let img = ImageField::from_fn(5, 4, |x, y| 2.0 * x - y + 0.5).unwrap();
        for p in [Vec2::new(1.25, 2.5), Vec2::new(0.0, 0.0), Vec2::new(3.9, 2.99)] {
            assert_relative_eq!(img.sample(p), 2.0 * p.x - p.y + 0.5, epsilon = 1e-12);
        }
        // clamped outside
        assert_relative_eq!(img.sample(Vec2::new(-3.0, 0.0)), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn identity_map_is_exact() {
        let id = VectorField::identity(6, 5);
        for p in [Vec2::new(0.3, 0.7), Vec2::new(-2.0, 9.0), Vec2::new(5.0, 4.0)] {
            assert_eq!(id.sample_map(p), p);
        }
        let det = map_jacobian_det(&id);
        assert!(det.data().iter().all(|d| (*d - 1.0).abs() < 1e-15));
    }

    #[test]
    fn gradient_of_ramp() {
        let img = ImageField::from_fn(6, 6, |x, y| 0.5 * x + 2.0 * y).unwrap();
        let g = image_gradient(&img);
        for v in g.data() {
            assert_relative_eq!(v.x, 0.5, epsilon = 1e-12);
            assert_relative_eq!(v.y, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn green_kernel_preserves_constants() {
        let taps = gaussian_taps(2.3).unwrap();
        assert_relative_eq!(taps.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert_eq!(taps.len(), 2 * 10 + 1);
        let mut m = VectorField::zeros(8, 7);
        m.data_mut().iter_mut().for_each(|v| *v = Vec2::new(1.5, -0.5));
        let u = apply_green_kernel(&m, &taps);
        for v in u.data() {
            assert_relative_eq!(v.x, 1.5, epsilon = 1e-13);
            assert_relative_eq!(v.y, -0.5, epsilon = 1e-13);
        }
        assert!(gaussian_taps(0.0).is_err());
    }

    #[test]
    fn zero_velocity_maps_are_identity() {
        let v = VelocityString::zeros(5, 8, 8);
        let maps = integrate_maps(&v, None).unwrap();
        let id = VectorField::identity(8, 8);
        assert!(maps.inverse.iter().chain(&maps.backward).all(|m| *m == id));
    }

    #[test]
    fn constant_velocity_translates() {
        let n_t = 5;
        let mut v = VelocityString::zeros(n_t, 16, 16);
        for u in v.velocity.iter_mut() {
            u.data_mut().iter_mut().for_each(|x| *x = Vec2::new(2.0, 1.0));
        }
        let maps = integrate_maps(&v, None).unwrap();
        // interior point: φ_N(x) = x - (2, 1), ψ_0(x) = x + (2, 1)
        let x = Vec2::new(8.0, 8.0);
        assert!((maps.inverse[n_t - 1].get(8, 8) - (x - Vec2::new(2.0, 1.0))).norm() < 1e-12);
        assert!((maps.backward[0].get(8, 8) - (x + Vec2::new(2.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn noise_fields_partition_unity() {
        let noise = ImageNoise::grid(32, 32, 9, 1.5).unwrap();
        assert_eq!(noise.len(), 162);
        let ones = vec![1.0; noise.len()];
        let total = noise.realization(&ones);
        for v in total.data() {
            assert_relative_eq!(v.x, 1.5, epsilon = 1e-12);
            assert_relative_eq!(v.y, 1.5, epsilon = 1e-12);
        }
        let zero = ImageNoise::grid(32, 32, 9, 0.0).unwrap();
        assert!(zero.realization(&ones).max_norm() == 0.0);
    }

    #[test]
    fn zero_amplitude_noise_matches_deterministic() {
        let n_t = 4;
        let mut v = VelocityString::zeros(n_t, 12, 12);
        for (k, u) in v.velocity.iter_mut().enumerate() {
            for (p, x) in u.data_mut().iter_mut().enumerate() {
                *x = Vec2::new((p % 7) as f64 * 0.1, k as f64 * 0.2);
            }
        }
        let noise = ImageNoise::grid(12, 12, 3, 0.0).unwrap();
        let path = BrownianPath::unit(3, n_t - 1, noise.len()).unwrap();
        let a = integrate_maps(&v, Some((&noise, &path))).unwrap();
        let b = integrate_maps(&v, None).unwrap();
        assert_eq!(a.inverse, b.inverse);
        assert_eq!(a.backward, b.backward);
    }

    #[test]
    fn triangle_coverage() {
        let img = triangle_image(16, 16, [[2.0, 2.0], [13.0, 2.0], [2.0, 13.0]], 4).unwrap();
        assert_eq!(img.get(4, 4), 1.0);
        assert_eq!(img.get(14, 14), 0.0);
        let (lo, hi) = img.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!(triangle_image(8, 8, [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 2).is_err());
    }

    #[test]
    fn matching_reduces_ssd() {
        let src = triangle_image(24, 24, [[5.0, 5.0], [17.0, 6.0], [8.0, 17.0]], 4).unwrap();
        let tgt = triangle_image(24, 24, [[6.0, 6.0], [18.0, 7.0], [9.0, 18.0]], 4).unwrap();
        let problem = ImageProblem::new(src, tgt, 0.3, 6, 2.0, ImageNoise::empty(24, 24)).unwrap();
        let run = run_image_matching(
            &problem,
            &ImageRunConfig {
                iterations: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(run.ssd.last().unwrap() < &run.initial_ssd);
    }

    #[test]
    fn running_mean_values() {
        assert_eq!(running_mean(&[1.0, 3.0, 5.0, 7.0], 1), vec![3.0, 4.0, 5.0]);
        assert!(running_mean(&[1.0], 4).is_empty());
    }

    #[test]
    fn identical_images_stop_at_once() {
        let img = triangle_image(16, 16, [[3.0, 3.0], [12.0, 4.0], [5.0, 12.0]], 2).unwrap();
        let problem = ImageProblem::new(img.clone(), img, 0.1, 5, 2.0, ImageNoise::empty(16, 16)).unwrap();
        let run = run_image_matching(&problem, &ImageRunConfig::default()).unwrap();
        assert_eq!(run.ssd, vec![0.0]);
        assert_eq!(run.reduction(), 0.0);
    }

    #[test]
    fn gradient_error_is_second_order() {
        // a bump whose width scales with the grid: the central-difference
        // error in units of the bump width shrinks 4x per refinement
        let err = |n: usize| {
            let s = n as f64 / 8.0;
            let c = n as f64 / 2.0;
            let img = ImageField::from_fn(n, n, |x, y| (-((x - c).powi(2) + (y - c).powi(2)) / (2.0 * s * s)).exp())
                .unwrap();
            let g = image_gradient(&img);
            let mut worst: f64 = 0.0;
            for j in 2..n - 2 {
                for i in 2..n - 2 {
                    let (x, y) = (i as f64 - c, j as f64 - c);
                    let f = (-(x * x + y * y) / (2.0 * s * s)).exp();
                    let exact = Vec2::new(-x / (s * s) * f, -y / (s * s) * f);
                    worst = worst.max((g.get(i, j) - exact).norm() * s);
                }
            }
            worst
        };
        let ratio = err(32) / err(64);
        assert!((3.6..=4.4).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn green_kernel_of_impulse_is_gaussian() {
        let n = 41;
        let r = 2.5;
        let mut m = VectorField::zeros(n, n);
        m.data_mut()[20 + n * 20] = Vec2::new(1.0, 0.0);
        let u = apply_green_kernel(&m, &gaussian_taps(r).unwrap());
        let norm: f64 = (-10i64..=10).map(|d| (-0.5 * (d * d) as f64 / (r * r)).exp()).sum();
        for j in 0..n {
            for i in 0..n {
                let (dx, dy) = (i as f64 - 20.0, j as f64 - 20.0);
                let expected = if dx.abs() <= 10.0 && dy.abs() <= 10.0 {
                    (-0.5 * (dx * dx + dy * dy) / (r * r)).exp() / (norm * norm)
                } else {
                    0.0
                };
                assert!((u.get(i, j).x - expected).abs() < 1e-6);
                assert_eq!(u.get(i, j).y, 0.0);
            }
        }
    }

    #[test]
    fn jacobian_of_linear_maps() {
        let n = 12;
        let scale = VectorField::from_vec(
            n,
            n,
            VectorField::identity(n, n).data().iter().map(|p| p * 2.0).collect(),
        )
        .unwrap();
        assert!(map_jacobian_det(&scale).data().iter().all(|d| (d - 4.0).abs() < 1e-12));
        let a = Mat2::new(1.2, 0.3, -0.1, 0.8);
        let affine = VectorField::from_vec(
            n,
            n,
            VectorField::identity(n, n).data().iter().map(|p| a * p + Vec2::new(1.0, -2.0)).collect(),
        )
        .unwrap();
        let det = a.determinant();
        assert!(map_jacobian_det(&affine).data().iter().all(|d| (d - det).abs() < 1e-12));
    }

    #[test]
    fn integer_shift_warp_is_exact() {
        let n = 10;
        let img = ImageField::from_fn(n, n, |x, y| (x * 3.0 + y * y) % 7.0).unwrap();
        let shift = VectorField::from_vec(
            n,
            n,
            VectorField::identity(n, n).data().iter().map(|p| p + Vec2::new(2.0, 1.0)).collect(),
        )
        .unwrap();
        let w = warp_image(&img, &shift).unwrap();
        for j in 0..n - 1 {
            for i in 0..n - 2 {
                assert_eq!(w.get(i, j), img.get(i + 2, j + 1));
            }
        }
    }
}
