//! Seedable tables of Wiener increments.
//!
//! Increments are `N(0, dt)` draws from a ChaCha20 stream seeded with
//! `ChaCha20Rng::seed_from_u64(seed)`; the normals come from
//! `rand_distr::StandardNormal` (ziggurat). Row-major order: all `J`
//! channels of step 0, then step 1, and so on.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    increments: Vec<f64>,
    n_steps: usize,
    dim: usize,
    dt: f64,
    seed: u64,
}

impl BrownianPath {
    pub fn sample(seed: u64, n_steps: usize, dim: usize, dt: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::invalid("Brownian path needs at least one step"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid(format!("Brownian dt must be positive, got {dt}")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let sd = dt.sqrt();
        let increments = (0..n_steps * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sd
            })
            .collect();
        Ok(Self {
            increments,
            n_steps,
            dim,
            dt,
            seed,
        })
    }

    /// Unit-horizon path with `n_steps` increments of size `1 / n_steps`.
    pub fn unit(seed: u64, n_steps: usize, dim: usize) -> Result<Self> {
        Self::sample(seed, n_steps, dim, 1.0 / n_steps.max(1) as f64)
    }

    /// A path of all-zero increments (the deterministic model).
    pub fn zero(n_steps: usize, dim: usize, dt: f64) -> Self {
        Self {
            increments: vec![0.0; n_steps * dim],
            n_steps,
            dim,
            dt,
            seed: 0,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    /// Increments of step `k` (length `dim`).
    pub fn step(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.increments
    }

    /// Sums consecutive blocks so the path has `n_coarse` steps.
    ///
    /// `n_steps` must be a multiple of `n_coarse`. The summed increments
    /// are the same Brownian motion observed on the coarser grid.
    pub fn coarsen(&self, n_coarse: usize) -> Result<Self> {
        if n_coarse == 0 || self.n_steps % n_coarse != 0 {
            return Err(Error::shape(format!(
                "cannot aggregate {} Brownian steps into {n_coarse}",
                self.n_steps
            )));
        }
        if n_coarse == self.n_steps {
            return Ok(self.clone());
        }
        let ratio = self.n_steps / n_coarse;
        let mut increments = vec![0.0; n_coarse * self.dim];
        for k in 0..self.n_steps {
            let target = &mut increments[(k / ratio) * self.dim..(k / ratio + 1) * self.dim];
            for (acc, w) in target.iter_mut().zip(self.step(k)) {
                *acc += w;
            }
        }
        Ok(Self {
            increments,
            n_steps: n_coarse,
            dim: self.dim,
            dt: self.dt * ratio as f64,
            seed: self.seed,
        })
    }
}

/// Deterministic sub-seed for stream `stream`, index `index` under `root`.
///
/// SplitMix64 finalizer applied twice; distinct `(stream, index)` pairs give
/// statistically independent ChaCha seeds.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(mix(root ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}
