//! Spatial noise fields `σ_l(x) = a_l k_{r_l}(|x - δ_l|)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernel::{make_kernel, RadialKernel};
use crate::{Mat2, Vec2};

#[derive(Clone)]
pub struct NoiseField {
    pub center: Vec2,
    pub amplitude: Vec2,
    kernel: Arc<dyn RadialKernel>,
}

impl NoiseField {
    pub fn new(center: Vec2, amplitude: Vec2, kernel: Arc<dyn RadialKernel>) -> Result<Self> {
        if !(center.iter().all(|c| c.is_finite()) && amplitude.iter().all(|a| a.is_finite())) {
            return Err(Error::invalid("noise field center/amplitude must be finite"));
        }
        Ok(Self {
            center,
            amplitude,
            kernel,
        })
    }

    pub fn kernel(&self) -> &dyn RadialKernel {
        self.kernel.as_ref()
    }

    pub fn scale(&self) -> f64 {
        self.kernel.scale()
    }

    pub fn eval(&self, x: Vec2) -> Vec2 {
        self.amplitude * self.kernel.eval(x - self.center)
    }

    /// `Dσ(x) = a ⊗ ∇k(x - δ)`.
    pub fn jacobian(&self, x: Vec2) -> Mat2 {
        self.kernel.outer_grad(self.amplitude, x - self.center)
    }
}

impl fmt::Debug for NoiseField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NoiseField")
            .field("center", &[self.center.x, self.center.y])
            .field("amplitude", &[self.amplitude.x, self.amplitude.y])
            .field("scale", &self.kernel.scale())
            .field("kind", &self.kernel.name())
            .finish()
    }
}

/// A finite basis of `J` noise fields. `J = 0` is the deterministic model.
#[derive(Debug, Clone, Default)]
pub struct NoiseBasis {
    fields: Vec<NoiseField>,
}

/// Axis-aligned rectangle `[min.x, max.x] × [min.y, max.y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl BBox {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([0.0, 0.0], [1.0, 1.0])
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.max[0] > self.min[0] && self.max[1] > self.min[1])
            || self.min.iter().chain(&self.max).any(|v| !v.is_finite())
    }
}

impl NoiseBasis {
    pub fn new(fields: Vec<NoiseField>) -> Self {
        Self { fields }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[NoiseField] {
        &self.fields
    }

    /// `σ_l(x)` for every field.
    pub fn eval(&self, x: Vec2) -> Vec<Vec2> {
        self.fields.iter().map(|f| f.eval(x)).collect()
    }

    /// `Dσ_l(x)` for every field.
    pub fn jacobians(&self, x: Vec2) -> Vec<Mat2> {
        self.fields.iter().map(|f| f.jacobian(x)).collect()
    }

    /// `Σ_l σ_l(x) dw_l`.
    pub fn displacement(&self, x: Vec2, dw: &[f64]) -> Vec2 {
        debug_assert_eq!(dw.len(), self.fields.len());
        self.fields
            .iter()
            .zip(dw)
            .fold(Vec2::zeros(), |acc, (f, w)| acc + f.eval(x) * *w)
    }

    /// `Σ_l Dσ_l(x) dw_l`.
    pub fn jacobian_increment(&self, x: Vec2, dw: &[f64]) -> Mat2 {
        debug_assert_eq!(dw.len(), self.fields.len());
        self.fields
            .iter()
            .zip(dw)
            .fold(Mat2::zeros(), |acc, (f, w)| acc + f.jacobian(x) * *w)
    }

    /// `Σ_l Dσ_l(x)^T p dw_l`, the momentum noise of the Hamiltonian system.
    pub fn momentum_increment(&self, x: Vec2, p: Vec2, dw: &[f64]) -> Vec2 {
        self.jacobian_increment(x, dw).transpose() * p
    }

    /// Multiplies every amplitude by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fields: self
                .fields
                .iter()
                .map(|f| NoiseField {
                    amplitude: f.amplitude * factor,
                    ..f.clone()
                })
                .collect(),
        }
    }

    pub fn translated(&self, v: Vec2) -> Self {
        Self {
            fields: self
                .fields
                .iter()
                .map(|f| NoiseField {
                    center: f.center + v,
                    ..f.clone()
                })
                .collect(),
        }
    }

    /// Replaces every field's length scale, keeping its kernel family.
    pub fn with_scale(&self, r: f64) -> Result<Self> {
        let fields = self
            .fields
            .iter()
            .map(|f| {
                Ok(NoiseField {
                    kernel: make_kernel(f.kernel.name(), r)?,
                    ..f.clone()
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { fields })
    }

    pub fn extend(&mut self, other: NoiseBasis) {
        self.fields.extend(other.fields);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("noise basis serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("noise basis JSON: {e}")))
    }
}

/// Fields on a uniform `n × n` grid over `bbox`, sharing scale and amplitude.
///
/// Centers sit at cell midpoints: `min + (j + 1/2) * extent / n`.
pub fn make_grid_basis(
    bbox: BBox,
    n_per_axis: usize,
    scale: f64,
    amplitude: Vec2,
    kind: &str,
) -> Result<NoiseBasis> {
    if n_per_axis == 0 {
        return Err(Error::invalid("n_per_axis must be at least 1"));
    }
    if bbox.is_degenerate() {
        return Err(Error::invalid(format!("degenerate bounding box {bbox:?}")));
    }
    let kernel = make_kernel(kind, scale)?;
    let n = n_per_axis as f64;
    let step = [(bbox.max[0] - bbox.min[0]) / n, (bbox.max[1] - bbox.min[1]) / n];
    let mut fields = Vec::with_capacity(n_per_axis * n_per_axis);
    for jy in 0..n_per_axis {
        for jx in 0..n_per_axis {
            let center = Vec2::new(
                bbox.min[0] + (jx as f64 + 0.5) * step[0],
                bbox.min[1] + (jy as f64 + 0.5) * step[1],
            );
            fields.push(NoiseField::new(center, amplitude, kernel.clone())?);
        }
    }
    Ok(NoiseBasis::new(fields))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    center: [f64; 2],
    amplitude: [f64; 2],
    scale: f64,
    kind: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BasisDoc {
    entries: Vec<EntryDoc>,
}

impl Serialize for NoiseBasis {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        BasisDoc {
            entries: self
                .fields
                .iter()
                .map(|f| EntryDoc {
                    center: [f.center.x, f.center.y],
                    amplitude: [f.amplitude.x, f.amplitude.y],
                    scale: f.kernel.scale(),
                    kind: f.kernel.name().to_string(),
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NoiseBasis {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = BasisDoc::deserialize(deserializer)?;
        let fields = doc
            .entries
            .into_iter()
            .map(|e| {
                let kernel = make_kernel(&e.kind, e.scale)?;
                NoiseField::new(e.center.into(), e.amplitude.into(), kernel)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        Ok(NoiseBasis::new(fields))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gaussian;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(center: Vec2, amp: Vec2, r: f64) -> NoiseBasis {
        NoiseBasis::new(vec![NoiseField::new(center, amp, gaussian(r).unwrap()).unwrap()])
    }

    #[test]
    fn zero_amplitude_gives_zero_fields() {
        let b = make_grid_basis(BBox::unit(), 3, 0.2, Vec2::zeros(), "gaussian").unwrap();
        for s in b.eval(Vec2::new(0.3, 0.4)) {
            assert_eq!(s, Vec2::zeros());
        }
    }

    #[test]
    fn value_at_center_is_amplitude() {
        let b = single(Vec2::new(1.0, 2.0), Vec2::new(0.3, -0.2), 0.5);
        assert_eq!(b.eval(Vec2::new(1.0, 2.0))[0], Vec2::new(0.3, -0.2));
        assert_eq!(b.jacobians(Vec2::new(1.0, 2.0))[0], Mat2::zeros());
    }

    #[test]
    fn ten_scales_away() {
        let a = Vec2::new(0.3, 0.4);
        let b = single(Vec2::zeros(), a, 0.2);
        let s = b.eval(Vec2::new(2.0, 0.0))[0];
        assert_relative_eq!(s.norm(), a.norm() * (-50.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn flat_kernel_limit_has_tiny_jacobian() {
        let a = Vec2::new(0.7, -0.4);
        let b = single(Vec2::zeros(), a, 1e6);
        let j = b.jacobians(Vec2::new(0.6, -0.8))[0];
        assert!(j.iter().all(|v| v.abs() < 1e-11 * a.norm()));
    }

    #[test]
    fn grid_counts_and_midpoint() {
        let b = make_grid_basis(BBox::unit(), 4, 0.2, Vec2::new(0.1, 0.0), "gaussian").unwrap();
        assert_eq!(b.len(), 16);
        let b = make_grid_basis(BBox::unit(), 9, 0.2, Vec2::new(0.1, 0.0), "bspline").unwrap();
        assert_eq!(b.len(), 81);
        let b = make_grid_basis(BBox::unit(), 1, 0.2, Vec2::new(0.1, 0.0), "gaussian").unwrap();
        assert_eq!(b.fields()[0].center, Vec2::new(0.5, 0.5));
    }

    #[test]
    fn grid_rejects_bad_input() {
        let amp = Vec2::new(0.1, 0.0);
        assert!(make_grid_basis(BBox::unit(), 4, 0.0, amp, "gaussian").is_err());
        assert!(make_grid_basis(BBox::new([0.0, 0.0], [0.0, 1.0]), 4, 0.2, amp, "gaussian").is_err());
        assert!(make_grid_basis(BBox::unit(), 0, 0.2, amp, "gaussian").is_err());
        assert!(make_grid_basis(BBox::unit(), 2, 0.2, amp, "cauchy").is_err());
    }

    #[test]
    fn json_document_shape() {
        let b = make_grid_basis(BBox::unit(), 1, 0.25, Vec2::new(0.1, 0.2), "bspline").unwrap();
        let v: serde_json::Value = serde_json::from_str(&b.to_json()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"entries": [
                {"center": [0.5, 0.5], "amplitude": [0.1, 0.2], "scale": 0.25, "kind": "bspline"}
            ]})
        );
        assert!(NoiseBasis::from_json(r#"{"entries": [], "extra": 1}"#).is_err());
        assert!(NoiseBasis::from_json(
            r#"{"entries": [{"center":[0,0],"amplitude":[1,0],"scale":-1,"kind":"gaussian"}]}"#
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip(
            entries in proptest::collection::vec(
                (-5.0f64..5.0, -5.0f64..5.0, -1.0f64..1.0, -1.0f64..1.0, 0.01f64..3.0, any::<bool>()), 0..6)
        ) {
            let fields = entries.iter().map(|&(cx, cy, ax, ay, r, spline)| {
                let kernel = make_kernel(if spline { "bspline" } else { "gaussian" }, r).unwrap();
                NoiseField::new(Vec2::new(cx, cy), Vec2::new(ax, ay), kernel).unwrap()
            }).collect();
            let basis = NoiseBasis::new(fields);
            let back = NoiseBasis::from_json(&basis.to_json()).unwrap();
            prop_assert_eq!(back.to_json(), basis.to_json());
        }

        #[test]
        fn linear_in_amplitudes(
            x in -1.0f64..1.0, y in -1.0f64..1.0, s in -3.0f64..3.0
        ) {
            let b = make_grid_basis(BBox::new([-1.0, -1.0], [1.0, 1.0]), 2, 0.6,
                Vec2::new(0.2, -0.1), "gaussian").unwrap();
            let p = Vec2::new(x, y);
            let scaled = b.scaled(s);
            for (a, b2) in b.eval(p).iter().zip(scaled.eval(p)) {
                prop_assert!((a * s - b2).norm() < 1e-14);
            }
            for (a, b2) in b.jacobians(p).iter().zip(scaled.jacobians(p)) {
                prop_assert!((a * s - b2).norm() < 1e-14);
            }
        }

        #[test]
        fn jacobian_matches_finite_differences(x in -1.0f64..1.0, y in -1.0f64..1.0) {
            let b = make_grid_basis(BBox::new([-1.0, -1.0], [1.0, 1.0]), 2, 0.6,
                Vec2::new(0.2, -0.1), "gaussian").unwrap();
            let p = Vec2::new(x, y);
            let h = 1e-6;
            for (l, jac) in b.jacobians(p).into_iter().enumerate() {
                for col in 0..2 {
                    let mut e = Vec2::zeros();
                    e[col] = h;
                    let fd = (b.eval(p + e)[l] - b.eval(p - e)[l]) / (2.0 * h);
                    let scale = jac.norm().max(1e-3);
                    prop_assert!((fd - jac.column(col)).norm() / scale < 1e-5);
                }
            }
        }
    }
}
