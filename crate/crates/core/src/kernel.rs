//! Radial kernels.
//!
//! The velocity metric only ever needs the Green's function `K` of its
//! smoothing operator, never the operator itself; both `K` and the noise
//! profiles `k_r` live here. Kernels are looked up by name through
//! [`registry`] so configs and noise-basis documents can select them.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::{Mat2, Vec2};

/// A radially symmetric kernel `k(x) = profile(|x|)`.
pub trait RadialKernel: Debug + Send + Sync {
    /// Registry name, also used in serialized documents.
    fn name(&self) -> &'static str;

    /// Length scale `r`.
    fn scale(&self) -> f64;

    /// Value as a function of the distance `d >= 0`.
    fn profile(&self, d: f64) -> f64;

    /// `profile'(d) / d`, so that `grad k(x) = x * radial_factor(|x|)`.
    /// Must be finite at `d = 0`.
    fn radial_factor(&self, d: f64) -> f64;

    fn eval(&self, x: Vec2) -> f64 {
        self.profile(x.norm())
    }

    fn grad(&self, x: Vec2) -> Vec2 {
        x * self.radial_factor(x.norm())
    }

    /// Hessian-free helper used by Jacobian transport: `a ⊗ grad k(x)`.
    fn outer_grad(&self, a: Vec2, x: Vec2) -> Mat2 {
        a * self.grad(x).transpose()
    }
}

/// `k(x) = exp(-|x|² / (2 r²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    r: f64,
    inv_r2: f64,
}

impl GaussianKernel {
    pub fn new(r: f64) -> Result<Self> {
        check_scale(r)?;
        Ok(Self {
            r,
            inv_r2: 1.0 / (r * r),
        })
    }
}

impl RadialKernel for GaussianKernel {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn scale(&self) -> f64 {
        self.r
    }

    fn profile(&self, d: f64) -> f64 {
        (-0.5 * d * d * self.inv_r2).exp()
    }

    fn radial_factor(&self, d: f64) -> f64 {
        -self.inv_r2 * self.profile(d)
    }

    fn eval(&self, x: Vec2) -> f64 {
        (-0.5 * x.norm_squared() * self.inv_r2).exp()
    }

    fn grad(&self, x: Vec2) -> Vec2 {
        x * (-self.inv_r2 * self.eval(x))
    }
}

/// Centered uniform cubic B-spline `b3(|x| / r)`.
///
/// Uses the uniform-knot normalization, so `eval(0) = 2/3`:
///
/// ```text
/// b3(s) = 2/3 - s² + s³/2     0 <= s < 1
///       = (2 - s)³ / 6        1 <= s < 2
///       = 0                   s >= 2
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BSplineKernel {
    r: f64,
}

impl BSplineKernel {
    pub const PEAK: f64 = 2.0 / 3.0;

    pub fn new(r: f64) -> Result<Self> {
        check_scale(r)?;
        Ok(Self { r })
    }
}

impl RadialKernel for BSplineKernel {
    fn name(&self) -> &'static str {
        "bspline"
    }

    fn scale(&self) -> f64 {
        self.r
    }

    fn profile(&self, d: f64) -> f64 {
        let s = d / self.r;
        if s < 1.0 {
            Self::PEAK - s * s + 0.5 * s * s * s
        } else if s < 2.0 {
            let t = 2.0 - s;
            t * t * t / 6.0
        } else {
            0.0
        }
    }

    fn radial_factor(&self, d: f64) -> f64 {
        let s = d / self.r;
        let r2 = self.r * self.r;
        if s < 1.0 {
            // b3'(s)/s = -2 + 1.5 s, finite at s = 0
            (-2.0 + 1.5 * s) / r2
        } else if s < 2.0 {
            let t = 2.0 - s;
            -0.5 * t * t / (s * r2)
        } else {
            0.0
        }
    }
}

fn check_scale(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("kernel scale must be positive, got {r}")))
    }
}

pub type KernelFactory = fn(f64) -> Result<Arc<dyn RadialKernel>>;

fn gaussian_factory(r: f64) -> Result<Arc<dyn RadialKernel>> {
    Ok(Arc::new(GaussianKernel::new(r)?))
}

fn bspline_factory(r: f64) -> Result<Arc<dyn RadialKernel>> {
    Ok(Arc::new(BSplineKernel::new(r)?))
}

/// Name → factory table of the available kernel families.
pub fn registry() -> &'static BTreeMap<&'static str, KernelFactory> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, KernelFactory>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<&'static str, KernelFactory> = BTreeMap::new();
        map.insert("gaussian", gaussian_factory);
        map.insert("bspline", bspline_factory);
        map
    })
}

/// Builds a kernel by registry name.
pub fn make_kernel(kind: &str, scale: f64) -> Result<Arc<dyn RadialKernel>> {
    let factory = registry()
        .get(kind)
        .ok_or_else(|| Error::UnknownStrategy {
            registry: "kernel",
            name: kind.to_string(),
            known: registry().keys().copied().collect::<Vec<_>>().join(", "),
        })?;
    factory(scale)
}

pub fn gaussian(r: f64) -> Result<Arc<dyn RadialKernel>> {
    gaussian_factory(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn central_diff(k: &dyn RadialKernel, x: Vec2, h: f64) -> Vec2 {
        let ex = Vec2::new(h, 0.0);
        let ey = Vec2::new(0.0, h);
        Vec2::new(
            (k.eval(x + ex) - k.eval(x - ex)) / (2.0 * h),
            (k.eval(x + ey) - k.eval(x - ey)) / (2.0 * h),
        )
    }

    #[test]
    fn gaussian_values() {
        let k = GaussianKernel::new(1.0).unwrap();
        assert_eq!(k.eval(Vec2::zeros()), 1.0);
        assert_relative_eq!(k.eval(Vec2::new(1.0, 0.0)), 0.6065306597, epsilon = 1e-10);
        let k = GaussianKernel::new(0.5).unwrap();
        assert_relative_eq!(k.eval(Vec2::new(1.0, 0.0)), 0.1353352832, epsilon = 1e-10);
    }

    #[test]
    fn gaussian_gradient_closed_form() {
        let k = GaussianKernel::new(1.0).unwrap();
        assert_eq!(k.grad(Vec2::zeros()), Vec2::zeros());
        let g = k.grad(Vec2::new(1.0, 0.0));
        assert_relative_eq!(g.x, -(-0.5f64).exp(), epsilon = 1e-15);
        assert_eq!(g.y, 0.0);
    }

    #[test]
    fn bspline_support_and_peak() {
        let k = BSplineKernel::new(0.5).unwrap();
        assert_eq!(k.eval(Vec2::zeros()), 2.0 / 3.0);
        assert_eq!(k.eval(Vec2::new(1.0, 0.0)), 0.0);
        assert_eq!(k.eval(Vec2::new(0.8, 0.7)), 0.0);
        assert_eq!(k.grad(Vec2::new(1.5, 0.0)), Vec2::zeros());
        // knot values of the uniform cubic B-spline
        assert_relative_eq!(k.eval(Vec2::new(0.5, 0.0)), 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn bspline_derivative_continuous_at_knot() {
        let k = BSplineKernel::new(1.0).unwrap();
        let below = k.grad(Vec2::new(1.0 - 1e-12, 0.0));
        let above = k.grad(Vec2::new(1.0 + 1e-12, 0.0));
        assert_relative_eq!(below.x, above.x, epsilon = 1e-9);
        assert_relative_eq!(below.x, -0.5, epsilon = 1e-9);
    }

    #[test]
    fn gaussian_strictly_decreasing() {
        let k = GaussianKernel::new(0.7).unwrap();
        let mut prev = k.profile(0.0);
        for i in 1..100 {
            let v = k.profile(i as f64 * 0.05);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn rejects_bad_scale() {
        assert!(GaussianKernel::new(0.0).is_err());
        assert!(BSplineKernel::new(-1.0).is_err());
        assert!(GaussianKernel::new(f64::NAN).is_err());
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(make_kernel("gaussian", 1.0).unwrap().name(), "gaussian");
        assert_eq!(make_kernel("bspline", 1.0).unwrap().name(), "bspline");
        let err = make_kernel("laplace", 1.0).unwrap_err().to_string();
        assert!(err.contains("bspline, gaussian"), "{err}");
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(
            x in -2.0f64..2.0, y in -2.0f64..2.0, r in 0.3f64..2.0, spline in any::<bool>()
        ) {
            let k: Arc<dyn RadialKernel> = if spline {
                Arc::new(BSplineKernel::new(r).unwrap())
            } else {
                Arc::new(GaussianKernel::new(r).unwrap())
            };
            let p = Vec2::new(x, y);
            // B-spline second derivative jumps at the knots; keep away from them
            if spline {
                let s = p.norm() / r;
                prop_assume!((s - 1.0).abs() > 1e-3 && (s - 2.0).abs() > 1e-3);
            }
            let analytic = k.grad(p);
            let fd = central_diff(k.as_ref(), p, 1e-6);
            let scale = analytic.norm().max(1e-3);
            prop_assert!((analytic - fd).norm() / scale < 1e-6,
                "analytic {analytic:?} fd {fd:?}");
        }
    }
}
