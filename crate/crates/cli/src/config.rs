//! Run configuration: one JSON document, unknown keys rejected everywhere.
//!
//! Every random stream of a run is derived from the root `seed`, so the
//! per-section settings carry no seeds of their own.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use stochmatch_core::brownian::derive_seed;
use stochmatch_core::image::{ImageNoise, ImageProblem, ImageRunConfig};
use stochmatch_core::io::{load_image, load_landmarks, load_observations, resolve};
use stochmatch_core::kernel::{make_kernel, RadialKernel};
use stochmatch_core::landmark::LandmarkConfig;
use stochmatch_core::noise::{make_grid_basis, BBox, NoiseBasis};
use stochmatch_core::stats::{EmConfig, FrechetConfig, InferenceSpec, InferredParameter};
use stochmatch_core::string::{MatchProblem, OptimizerConfig};
use stochmatch_core::Vec2;

use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; when present it must name the command being run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataPaths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub sample: SampleSection,
    #[serde(default)]
    pub mean: FrechetConfig,
    #[serde(default)]
    pub infer: InferSection,
    #[serde(default)]
    pub em: EmSection,
    #[serde(default)]
    pub image: ImageSection,
    /// Emit SVG figures next to the CSV outputs.
    #[serde(default = "yes")]
    pub figures: bool,
}

fn yes() -> bool {
    true
}

/// Input files, relative to the directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Observation set, `sample,i,x,y`.
    pub observations: Option<PathBuf>,
    /// Initial momentum for `sample`/`infer`, in the `i,x,y` layout.
    pub momentum: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSpec {
    pub kind: String,
    pub scale: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            kind: "gaussian".into(),
            scale: 0.5,
        }
    }
}

/// Grid of noise fields. Each amplitude vector gets its own `grid × grid`
/// fields, so `[[a, 0], [0, a]]` gives isotropic noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub grid: usize,
    pub scale: f64,
    pub kind: String,
    pub amplitudes: Vec<[f64; 2]>,
    /// `[[xmin, ymin], [xmax, ymax]]`; defaults to the source bounding box
    /// padded by one noise scale.
    pub bbox: Option<[[f64; 2]; 2]>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            grid: 4,
            scale: 0.6,
            kind: "gaussian".into(),
            amplitudes: Vec::new(),
            bbox: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub lambda: f64,
    pub n_t: usize,
    pub kernel: KernelSpec,
    pub noise: NoiseSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            n_t: 20,
            kernel: KernelSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub n_s: usize,
    pub window: Option<usize>,
    pub members: usize,
    pub schedule: String,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            epsilon: d.epsilon,
            max_iters: d.max_iters,
            tol: d.tol,
            n_s: d.n_s,
            window: d.window,
            members: d.members,
            schedule: d.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub n_samples: usize,
    /// Integration steps of each sampled flow over unit time.
    pub n_steps: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_steps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    pub parameter: InferredParameter,
    pub min: f64,
    pub max: f64,
    pub grid: usize,
    pub refine: usize,
    pub n_sim: usize,
}

impl Default for InferSection {
    fn default() -> Self {
        let d = InferenceSpec::default();
        Self {
            parameter: d.parameter,
            min: d.min,
            max: d.max,
            grid: d.grid,
            refine: d.refine,
            n_sim: d.n_sim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSection {
    pub iterations: usize,
    pub n_paths: usize,
    pub epsilon: f64,
}

impl Default for EmSection {
    fn default() -> Self {
        let d = EmConfig::default();
        Self {
            iterations: d.iterations,
            n_paths: d.n_paths,
            epsilon: d.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSection {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub lambda: f64,
    pub n_t: usize,
    /// Gaussian smoothing scale of the velocity, in pixels.
    pub kernel_scale: f64,
    /// Noise centres per axis; 0 disables noise.
    pub noise_grid: usize,
    /// Noise amplitude in pixels.
    pub noise_amplitude: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub tol: f64,
    pub schedule: String,
    /// Iterations skipped before the running mean of the SSD starts.
    pub burn_in: usize,
}

impl Default for ImageSection {
    fn default() -> Self {
        let d = ImageRunConfig::default();
        Self {
            source: None,
            target: None,
            lambda: 0.1,
            n_t: 10,
            kernel_scale: 2.0,
            noise_grid: 0,
            noise_amplitude: 0.0,
            epsilon: d.epsilon,
            iterations: d.iterations,
            tol: d.tol,
            schedule: d.schedule,
            burn_in: 0,
        }
    }
}

// Sub-seed streams of the root seed.
const OPTIMIZER_STREAM: u64 = 0x01;
const SAMPLE_STREAM: u64 = 0x02;
const MEAN_STREAM: u64 = 0x03;
const INFER_STREAM: u64 = 0x04;
const EM_STREAM: u64 = 0x05;
const IMAGE_STREAM: u64 = 0x06;

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Copy with every relative input path made relative to `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &Option<PathBuf>| p.as_ref().map(|p| resolve(base, p));
        let mut out = self.clone();
        out.data = DataPaths {
            source: fix(&self.data.source),
            target: fix(&self.data.target),
            observations: fix(&self.data.observations),
            momentum: fix(&self.data.momentum),
        };
        out.image.source = fix(&self.image.source);
        out.image.target = fix(&self.image.target);
        out
    }

    pub fn kernel(&self) -> Result<Arc<dyn RadialKernel>> {
        Ok(make_kernel(&self.model.kernel.kind, self.model.kernel.scale)?)
    }

    /// Noise basis around `reference` (used for the default bounding box).
    pub fn noise_basis(&self, reference: &LandmarkConfig) -> Result<NoiseBasis> {
        let spec = &self.model.noise;
        let mut basis = NoiseBasis::empty();
        if spec.amplitudes.is_empty() || spec.grid == 0 {
            return Ok(basis);
        }
        let bbox = match spec.bbox {
            Some([lo, hi]) => BBox::new(lo, hi),
            None => {
                let pts = reference.points();
                let pad = spec.scale;
                let lo = pts.iter().fold([f64::INFINITY; 2], |a, p| [a[0].min(p.x), a[1].min(p.y)]);
                let hi = pts.iter().fold([f64::NEG_INFINITY; 2], |a, p| [a[0].max(p.x), a[1].max(p.y)]);
                BBox::new([lo[0] - pad, lo[1] - pad], [hi[0] + pad, hi[1] + pad])
            }
        };
        for a in &spec.amplitudes {
            basis.extend(make_grid_basis(bbox, spec.grid, spec.scale, Vec2::new(a[0], a[1]), &spec.kind)?);
        }
        Ok(basis)
    }

    pub fn source(&self) -> Result<LandmarkConfig> {
        let p = self.data.source.as_ref().context("config needs data.source")?;
        Ok(load_landmarks(p)?)
    }

    pub fn target(&self) -> Result<LandmarkConfig> {
        let p = self.data.target.as_ref().context("config needs data.target")?;
        Ok(load_landmarks(p)?)
    }

    pub fn observations(&self) -> Result<Vec<LandmarkConfig>> {
        let p = self.data.observations.as_ref().context("config needs data.observations")?;
        Ok(load_observations(p)?)
    }

    /// Momentum vectors from `data.momentum`, or zeros.
    pub fn momentum(&self, n: usize) -> Result<Vec<Vec2>> {
        match &self.data.momentum {
            Some(p) => {
                let m = load_landmarks(p)?;
                if m.len() != n {
                    bail!("momentum file has {} rows, template has {n} landmarks", m.len());
                }
                Ok(m.points().to_vec())
            }
            None => Ok(vec![Vec2::zeros(); n]),
        }
    }

    pub fn match_problem(&self, source: LandmarkConfig, target: LandmarkConfig) -> Result<MatchProblem> {
        let basis = self.noise_basis(&source)?;
        Ok(MatchProblem::new(
            source,
            target,
            self.model.lambda,
            self.model.n_t,
            self.kernel()?,
            basis,
        )?)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            epsilon: o.epsilon,
            max_iters: o.max_iters,
            tol: o.tol,
            n_s: o.n_s,
            window: o.window,
            members: o.members,
            seed: derive_seed(self.seed, OPTIMIZER_STREAM, 0),
            schedule: o.schedule.clone(),
        }
    }

    pub fn sample_seed(&self) -> u64 {
        derive_seed(self.seed, SAMPLE_STREAM, 0)
    }

    /// Inner optimizer settings of the template estimate.
    pub fn mean_inner(&self) -> OptimizerConfig {
        OptimizerConfig {
            seed: derive_seed(self.seed, MEAN_STREAM, 0),
            ..self.optimizer()
        }
    }

    pub fn inference(&self) -> InferenceSpec {
        let i = &self.infer;
        InferenceSpec {
            parameter: i.parameter,
            min: i.min,
            max: i.max,
            grid: i.grid,
            refine: i.refine,
            n_sim: i.n_sim,
            seed: derive_seed(self.seed, INFER_STREAM, 0),
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            iterations: self.em.iterations,
            n_paths: self.em.n_paths,
            epsilon: self.em.epsilon,
            seed: derive_seed(self.seed, EM_STREAM, 0),
        }
    }

    pub fn image_problem(&self) -> Result<ImageProblem> {
        let s = &self.image;
        let src = load_image(s.source.as_ref().context("config needs image.source")?)?;
        let tgt = load_image(s.target.as_ref().context("config needs image.target")?)?;
        let noise = if s.noise_grid == 0 || s.noise_amplitude == 0.0 {
            ImageNoise::empty(src.nx(), src.ny())
        } else {
            ImageNoise::grid(src.nx(), src.ny(), s.noise_grid, s.noise_amplitude)?
        };
        Ok(ImageProblem::new(src, tgt, s.lambda, s.n_t, s.kernel_scale, noise)?)
    }

    pub fn image_run(&self) -> ImageRunConfig {
        ImageRunConfig {
            epsilon: self.image.epsilon,
            iterations: self.image.iterations,
            tol: self.image.tol,
            seed: derive_seed(self.seed, IMAGE_STREAM, 0),
            schedule: self.image.schedule.clone(),
        }
    }
}
