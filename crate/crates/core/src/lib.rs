//! Stochastic LDDMM shape matching with string methods.
//!
//! Landmark and image flows perturbed by Stratonovich noise in the
//! reconstruction equation, the stochastic Beg iteration at zero and
//! finite temperature, and statistics built on top of it (endpoint
//! sampling, mean strings, Fréchet-style means, moment-based noise
//! inference, importance-weighted EM gradients).
//!
//! | module | contents |
//! |--------|----------|
//! | [`kernel`] | radial kernels and their registry |
//! | [`noise`], [`brownian`] | noise-field bases, Wiener increments |
//! | [`landmark`] | landmark flows, Jacobian transport, energies, string gradient |
//! | [`string`] | string iteration, temperature schedules, ensemble statistics |
//! | [`image`] | grid images, semi-Lagrangian maps, image strings |
//! | [`stats`] | sampling, means, moment inference, EM |
//! | [`io`] | CSV, PGM and SVG formats |

pub mod brownian;
pub mod error;
pub mod image;
pub mod io;
pub mod kernel;
pub mod landmark;
pub mod noise;
pub mod stats;
pub mod string;

pub use error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
