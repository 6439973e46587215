//! Finite-difference checks of the string gradient against a frozen-field
//! energy written independently of the library's flow code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stochmatch_core::brownian::BrownianPath;
use stochmatch_core::kernel::{gaussian, RadialKernel};
use stochmatch_core::landmark::{string_gradient, LandmarkConfig, MomentumPath};
use stochmatch_core::noise::{make_grid_basis, BBox, NoiseBasis};
use stochmatch_core::string::MatchProblem;
use stochmatch_core::Vec2;

/// Energy of the velocity fields `u_k(x) = Σ_j K(x - c_kj) p_kj` with the
/// centres `c` frozen, transporting the source with the same
/// drift-plus-Heun-noise step.
struct FrozenField<'a> {
    centres: &'a MomentumPath,
    kernel: &'a dyn RadialKernel,
    basis: &'a NoiseBasis,
    path: &'a BrownianPath,
    source: &'a [Vec2],
    target: &'a [Vec2],
    lambda: f64,
}

impl FrozenField<'_> {
    fn noise(&self, x: Vec2, k: usize) -> Vec2 {
        let dw = self.path.step(k);
        let mut s = Vec2::zeros();
        for (field, w) in self.basis.fields().iter().zip(dw) {
            s += field.eval(x) * *w;
        }
        s
    }

    fn energy(&self, p: &MomentumPath) -> f64 {
        let n_t = p.n_t();
        let n = p.n_landmarks();
        let dt = 1.0 / (n_t - 1) as f64;
        let mut x: Vec<Vec2> = self.source.to_vec();
        let mut kinetic = 0.0;
        for k in 0..n_t - 1 {
            let mut norm = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let kij = self.kernel.eval(self.centres.at(k, i) - self.centres.at(k, j));
                    norm += p.at(k, i).dot(&p.at(k, j)) * kij;
                }
            }
            kinetic += 0.5 * dt * norm;
            for xi in x.iter_mut() {
                let mut u = Vec2::zeros();
                for j in 0..n {
                    u += p.at(k, j) * self.kernel.eval(*xi - self.centres.at(k, j));
                }
                let s0 = self.noise(*xi, k);
                let s1 = self.noise(*xi + s0, k);
                *xi += u * dt + 0.5 * (s0 + s1);
            }
        }
        let ssd: f64 = x.iter().zip(self.target).map(|(a, b)| (a - b).norm_squared()).sum();
        kinetic + ssd / (2.0 * self.lambda * self.lambda)
    }
}

fn random_config(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread)])
        .collect()
}

fn noise_basis() -> NoiseBasis {
    let bbox = BBox::new([-1.5, -1.5], [1.5, 1.5]);
    let mut basis = make_grid_basis(bbox, 4, 0.6, Vec2::new(0.08, 0.0), "gaussian").unwrap();
    basis.extend(make_grid_basis(bbox, 4, 0.6, Vec2::new(0.0, 0.08), "gaussian").unwrap());
    basis
}

#[test]
fn string_gradient_matches_frozen_field_differences() {
    let n = 5;
    let n_t = 20;
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let kernel = gaussian(0.5).unwrap();
    let basis = noise_basis();
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let source = LandmarkConfig::from_xy(&random_config(&mut rng, n, 1.0)).unwrap();
        let target = LandmarkConfig::from_xy(&random_config(&mut rng, n, 1.0)).unwrap();
        let mut p = MomentumPath::zeros(n_t, n);
        for v in p.data_mut() {
            *v = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        let lambda = 0.5;
        let problem =
            MatchProblem::new(source.clone(), target.clone(), lambda, n_t, kernel.clone(), basis.clone()).unwrap();
        let path = problem.path(1000 + trial).unwrap();
        let state = problem.evaluate(p.clone(), &path).unwrap();
        let g = string_gradient(&state, &target, lambda).unwrap();

        let oracle = FrozenField {
            centres: &state.trajectory,
            kernel: kernel.as_ref(),
            basis: &basis,
            path: &path,
            source: source.points(),
            target: target.points(),
            lambda,
        };
        assert!((oracle.energy(&p) - state.energy).abs() < 1e-12 * state.energy.max(1.0));

        // ∂E/∂p(t_k) = w_k K(q(t_k)) g(t_k)
        let dt = 1.0 / (n_t - 1) as f64;
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for k in 0..n_t {
            let w = if k + 1 < n_t { dt } else { 0.0 };
            for i in 0..n {
                let mut predicted = Vec2::zeros();
                for j in 0..n {
                    predicted +=
                        g.at(k, j) * kernel.eval(state.trajectory.at(k, i) - state.trajectory.at(k, j)) * w;
                }
                for c in 0..2 {
                    let mut plus = p.clone();
                    plus.at_mut(k, i)[c] += h;
                    let mut minus = p.clone();
                    minus.at_mut(k, i)[c] -= h;
                    let fd = (oracle.energy(&plus) - oracle.energy(&minus)) / (2.0 * h);
                    diff2 += (fd - predicted[c]).powi(2);
                    norm2 += fd * fd;
                }
            }
        }
        let rel = (diff2 / norm2).sqrt();
        worst = worst.max(rel);
        assert!(rel < 1e-3, "trial {trial}: relative error {rel}");
    }
    println!("worst relative error {worst:e}");
}
