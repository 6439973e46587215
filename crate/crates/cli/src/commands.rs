//! The subcommands, registered by name.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use anyhow::{bail, Context as _, Result};
use serde_json::{Map, Value};

use stochmatch_core::image::{integrate_maps, running_mean, run_image_matching, warp_image};
use stochmatch_core::io::{landmarks_csv, observations_csv, pgm_p5, trajectories_csv, velocity_csv};
use stochmatch_core::landmark::{LandmarkConfig, Trajectory};
use stochmatch_core::stats::{
    em_gradient, frechet_mean, mean_configuration, moment_inference, run_em, sample_endpoints, SampleModel,
};
use stochmatch_core::string::{endpoint_statistics, run_string, schedule, trajectory_statistics};

use crate::config::RunConfig;
use crate::output::{table, Cell, OutputDir};
use crate::svg::{mean_evolution_svg, montage_svg, strings_svg, StringsFigure};

/// State shared with a running command. Diagnostics are recorded as they
/// become available so a failed run still reports what it got to.
pub struct RunContext<'a> {
    pub cfg: &'a RunConfig,
    pub out: &'a mut OutputDir,
    pub diagnostics: Map<String, Value>,
}

impl RunContext<'_> {
    fn note(&mut self, key: &str, value: impl Into<Value>) {
        self.diagnostics.insert(key.to_string(), value.into());
    }
}

pub trait Command: Send + Sync {
    fn name(&self) -> &'static str;

    fn about(&self) -> &'static str;

    /// Input files the command reads (hashed into the manifest).
    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf>;

    fn run(&self, ctx: &mut RunContext) -> Result<()>;
}

type Factory = fn() -> Box<dyn Command>;

pub fn registry() -> &'static BTreeMap<&'static str, Factory> {
    static REGISTRY: OnceLock<BTreeMap<&'static str, Factory>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<&'static str, Factory> = BTreeMap::new();
        map.insert("match", || Box::new(Match));
        map.insert("image-match", || Box::new(ImageMatch));
        map.insert("sample", || Box::new(Sample));
        map.insert("mean", || Box::new(Mean));
        map.insert("infer", || Box::new(Infer));
        map.insert("em", || Box::new(Em));
        map
    })
}

pub fn command(name: &str) -> Option<Box<dyn Command>> {
    registry().get(name).map(|f| f())
}

fn present(paths: &[&Option<PathBuf>]) -> Vec<PathBuf> {
    paths.iter().filter_map(|p| (*p).clone()).collect()
}

fn moments_table(means: &[stochmatch_core::Vec2], covs: &[stochmatch_core::Mat2]) -> String {
    table(
        &["i", "mean_x", "mean_y", "cxx", "cxy", "cyy"],
        means.iter().zip(covs).enumerate().map(|(i, (m, c))| {
            vec![
                Cell::Int(i),
                m.x.into(),
                m.y.into(),
                c[(0, 0)].into(),
                c[(0, 1)].into(),
                c[(1, 1)].into(),
            ]
        }),
    )
}

/// Landmark string matching, zero or finite temperature.
struct Match;

impl Command for Match {
    fn name(&self) -> &'static str {
        "match"
    }

    fn about(&self) -> &'static str {
        "match source to target landmarks with the string iteration"
    }

    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        present(&[&cfg.data.source, &cfg.data.target])
    }

    fn run(&self, ctx: &mut RunContext) -> Result<()> {
        let cfg = ctx.cfg;
        let problem = cfg.match_problem(cfg.source()?, cfg.target()?)?;
        let opt = cfg.optimizer();
        ctx.note("noise_fields", problem.basis.len());
        let run = run_string(&problem, None, &opt)?;
        ctx.note("schedule", run.schedule);
        ctx.note("iterations", run.iterations());
        ctx.note("converged", run.converged);
        ctx.note("final_energy", run.energy.last().copied().unwrap_or(f64::NAN));
        ctx.note("final_residual", run.final_residual());

        ctx.out.write(
            "diagnostics.csv",
            table(
                &["iteration", "energy", "residual"],
                run.energy
                    .iter()
                    .zip(&run.residual)
                    .enumerate()
                    .map(|(k, (e, r))| vec![Cell::Int(k), (*e).into(), (*r).into()]),
            ),
        )?;
        // zero temperature: the converged string of every member;
        // finite temperature: the sampled window
        let (strings, momenta): (Vec<Trajectory>, Vec<Trajectory>) = if schedule(&opt.schedule)?.stops_at_tolerance() {
            run.members
                .iter()
                .map(|m| (m.state.trajectory.clone(), m.state.momentum.clone()))
                .unzip()
        } else {
            (run.history.clone(), run.momentum_history.clone())
        };
        ctx.note("strings", strings.len());
        ctx.out.write(
            "strings.csv",
            trajectories_csv(strings.iter().zip(&momenta).enumerate().map(|(s, (q, p))| (s, q, p))),
        )?;
        ctx.out.write(
            "mean_string.csv",
            trajectories_csv([(0, &run.mean_trajectory, &run.mean_momentum)]),
        )?;
        let endpoints: Vec<LandmarkConfig> = strings.iter().map(|s| s.endpoint()).collect();
        ctx.out.write("endpoints.csv", observations_csv(&endpoints))?;
        let moments = if strings.len() >= 2 {
            let (_, cov) = trajectory_statistics(&strings)?;
            let rows = cov.iter().enumerate().flat_map(|(k, row)| {
                let t = k as f64 / (cov.len() - 1) as f64;
                row.iter().enumerate().map(move |(i, c)| {
                    vec![Cell::Int(k), t.into(), Cell::Int(i), c[(0, 0)].into(), c[(0, 1)].into(), c[(1, 1)].into()]
                })
            });
            ctx.out.write("covariance.csv", table(&["k", "t", "i", "cxx", "cxy", "cyy"], rows))?;
            Some(endpoint_statistics(&endpoints)?)
        } else {
            None
        };
        if cfg.figures {
            let svg = strings_svg(&StringsFigure {
                source: &problem.source,
                target: &problem.target,
                strings: &strings,
                mean: Some(&run.mean_trajectory),
                endpoint_moments: moments.as_ref().map(|(m, c)| (m.as_slice(), c.as_slice())),
            });
            ctx.out.write("strings.svg", svg)?;
        }
        if !run.converged {
            ctx.note("warning", "iteration budget used up before the residual met tol");
        }
        Ok(())
    }
}

/// Image string matching on PGM inputs.
struct ImageMatch;

/// Snapshot times of the montage.
const MONTAGE_TIMES: [f64; 5] = [0.0, 0.24, 0.49, 0.75, 1.0];

impl Command for ImageMatch {
    fn name(&self) -> &'static str {
        "image-match"
    }

    fn about(&self) -> &'static str {
        "match two PGM images with the image string iteration"
    }

    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        present(&[&cfg.image.source, &cfg.image.target])
    }

    fn run(&self, ctx: &mut RunContext) -> Result<()> {
        let cfg = ctx.cfg;
        let problem = cfg.image_problem()?;
        let run_cfg = cfg.image_run();
        let run = run_image_matching(&problem, &run_cfg)?;
        ctx.note("iterations", run.ssd.len());
        ctx.note("initial_ssd", run.initial_ssd);
        ctx.note("final_ssd", run.ssd.last().copied().unwrap_or(run.initial_ssd));
        ctx.note("ssd_reduction", run.reduction());
        let burn_in = cfg.image.burn_in.min(run.ssd.len().saturating_sub(1));
        let mean = running_mean(&run.ssd, burn_in);
        if let Some(last) = mean.last() {
            ctx.note("running_mean_ssd", *last);
        }
        if mean.len() >= 20 {
            let tail = &mean[mean.len() - 20..];
            let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
            ctx.note("running_mean_variation_last20", (hi - lo) / tail[tail.len() - 1]);
        }
        ctx.out.write(
            "diagnostics.csv",
            table(
                &["iteration", "energy", "ssd", "running_mean_ssd"],
                run.energy.iter().zip(&run.ssd).enumerate().map(|(k, (e, s))| {
                    let rm = k.checked_sub(burn_in).map(|n| mean[n]).unwrap_or(f64::NAN);
                    vec![Cell::Int(k), (*e).into(), (*s).into(), rm.into()]
                }),
            ),
        )?;
        ctx.out.write("velocity.csv", velocity_csv(&run.string))?;
        ctx.out.write("deformed.pgm", pgm_p5(&run.deformed))?;
        if cfg.figures {
            let sched = schedule(&run_cfg.schedule)?;
            let path = problem.path(sched.path_seed(run_cfg.seed, 0, run.ssd.len().saturating_sub(1)))?;
            let maps = integrate_maps(&run.string, Some((&problem.noise, &path)))?;
            let last = problem.n_t - 1;
            let frames = MONTAGE_TIMES
                .iter()
                .map(|t| {
                    let k = (t * last as f64).round() as usize;
                    Ok((*t, warp_image(&problem.source, &maps.inverse[k])?))
                })
                .collect::<Result<Vec<_>>>()?;
            ctx.out.write("montage.svg", montage_svg(&frames))?;
        }
        Ok(())
    }
}

/// Endpoint samples of the perturbed flow from a template.
struct Sample;

impl Command for Sample {
    fn name(&self) -> &'static str {
        "sample"
    }

    fn about(&self) -> &'static str {
        "sample endpoint configurations of the perturbed flow from a template"
    }

    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        present(&[&cfg.data.source, &cfg.data.momentum])
    }

    fn run(&self, ctx: &mut RunContext) -> Result<()> {
        let cfg = ctx.cfg;
        let template = cfg.source()?;
        let model = SampleModel {
            momentum: cfg.momentum(template.len())?,
            kernel: cfg.kernel()?,
            basis: cfg.noise_basis(&template)?,
            n_steps: cfg.sample.n_steps,
            template,
        };
        let samples = sample_endpoints(&model, cfg.sample.n_samples, cfg.sample_seed())?;
        ctx.note("samples", samples.len());
        ctx.out.write("samples.csv", observations_csv(&samples))?;
        if samples.len() >= 2 {
            let (means, covs) = endpoint_statistics(&samples)?;
            ctx.out.write("moments.csv", moments_table(&means, &covs))?;
            ctx.note("mean_covariance_trace", covs.iter().map(|c| c.trace()).sum::<f64>() / covs.len() as f64);
        }
        Ok(())
    }
}

/// Template estimate from an observation set.
struct Mean;

impl Command for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn about(&self) -> &'static str {
        "estimate the mean template of an observation set"
    }

    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        present(&[&cfg.data.observations, &cfg.data.source])
    }

    fn run(&self, ctx: &mut RunContext) -> Result<()> {
        let cfg = ctx.cfg;
        let obs = cfg.observations()?;
        let init = match &cfg.data.source {
            Some(_) => cfg.source()?,
            None => mean_configuration(&obs)?,
        };
        // the target is replaced per observation
        let base = cfg.match_problem(init.clone(), obs[0].clone())?;
        let res = frechet_mean(&base, &obs, &init, &cfg.mean_inner(), &cfg.mean)?;
        ctx.note("outer_iterations", res.energy.len());
        ctx.note("final_energy", res.energy.last().copied().unwrap_or(f64::NAN));
        ctx.note("final_step", res.step_size.last().copied().unwrap_or(f64::NAN));
        ctx.note("inner_converged", res.inner_converged);
        ctx.note("update", cfg.mean.update.clone());
        ctx.out.write("mean.csv", landmarks_csv(&res.mean))?;
        ctx.out.write(
            "history.csv",
            table(
                &["outer", "i", "x", "y"],
                res.templates.iter().enumerate().flat_map(|(k, t)| {
                    t.points()
                        .iter()
                        .enumerate()
                        .map(move |(i, p)| vec![Cell::Int(k), Cell::Int(i), p.x.into(), p.y.into()])
                }),
            ),
        )?;
        ctx.out.write(
            "diagnostics.csv",
            table(
                &["outer", "energy", "step"],
                res.energy
                    .iter()
                    .zip(&res.step_size)
                    .enumerate()
                    .map(|(k, (e, s))| vec![Cell::Int(k), (*e).into(), (*s).into()]),
            ),
        )?;
        if cfg.figures {
            ctx.out.write("mean.svg", mean_evolution_svg(&obs, &res.templates))?;
        }
        Ok(())
    }
}

/// Method-of-moments estimate of one noise or kernel parameter.
struct Infer;

impl Command for Infer {
    fn name(&self) -> &'static str {
        "infer"
    }

    fn about(&self) -> &'static str {
        "estimate a model parameter by matching sample moments"
    }

    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        present(&[&cfg.data.observations, &cfg.data.source, &cfg.data.momentum])
    }

    fn run(&self, ctx: &mut RunContext) -> Result<()> {
        let cfg = ctx.cfg;
        let obs = cfg.observations()?;
        let template = cfg.source()?;
        if template.len() != obs[0].len() {
            bail!("template has {} landmarks, observations have {}", template.len(), obs[0].len());
        }
        let model = SampleModel {
            momentum: cfg.momentum(template.len())?,
            kernel: cfg.kernel()?,
            basis: cfg.noise_basis(&template)?,
            n_steps: cfg.sample.n_steps,
            template,
        };
        let spec = cfg.inference();
        let res = moment_inference(&model, &obs, &spec)?;
        ctx.note("parameter", serde_json::to_value(res.parameter)?);
        ctx.note("estimate", res.value);
        ctx.note("objective", res.objective);
        ctx.note("evaluations", res.evaluations.len());
        ctx.out.write(
            "objective.csv",
            table(
                &["evaluation", "value", "objective"],
                res.evaluations
                    .iter()
                    .enumerate()
                    .map(|(n, (v, f))| vec![Cell::Int(n), (*v).into(), (*f).into()]),
            ),
        )?;
        ctx.out.write(
            "estimate.csv",
            table(&["value", "objective"], [vec![res.value.into(), res.objective.into()]]),
        )?;
        Ok(())
    }
}

/// Importance-weighted gradient descent on the expected matching energy.
struct Em;

impl Command for Em {
    fn name(&self) -> &'static str {
        "em"
    }

    fn about(&self) -> &'static str {
        "match landmarks with importance-weighted (EM) gradients"
    }

    fn inputs(&self, cfg: &RunConfig) -> Vec<PathBuf> {
        present(&[&cfg.data.source, &cfg.data.target])
    }

    fn run(&self, ctx: &mut RunContext) -> Result<()> {
        let cfg = ctx.cfg;
        let problem = cfg.match_problem(cfg.source()?, cfg.target()?)?;
        let em = cfg.em_config();
        let run = run_em(&problem, None, &em)?;
        ctx.note("iterations", run.energy.len());
        ctx.note("final_energy", run.energy.last().copied().unwrap_or(f64::NAN));
        ctx.note("final_residual", run.residual.last().copied().unwrap_or(f64::NAN));
        ctx.out.write(
            "diagnostics.csv",
            table(
                &["iteration", "energy", "residual", "ess"],
                (0..run.energy.len())
                    .map(|k| vec![Cell::Int(k), run.energy[k].into(), run.residual[k].into(), run.ess[k].into()]),
            ),
        )?;
        // E-step at the final momentum, with a seed of its own
        let grad = em_gradient(&problem, &run.momentum, em.n_paths, em.seed.wrapping_add(1))
            .context("final E-step")?;
        let diff = grad.weighted.axpy(-1.0, &grad.unweighted)?;
        let norm = |p: &stochmatch_core::landmark::MomentumPath| p.data().iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        ctx.note(
            "weighted_vs_unweighted_rel_diff",
            norm(&diff) / norm(&grad.unweighted).max(f64::MIN_POSITIVE),
        );
        ctx.out.write(
            "weights.csv",
            table(
                &["sample", "weight"],
                grad.weights.iter().enumerate().map(|(m, w)| vec![Cell::Int(m), (*w).into()]),
            ),
        )?;
        let state = problem.deterministic().evaluate(run.momentum.clone(), &problem.deterministic().path(0)?)?;
        ctx.out.write("string.csv", trajectories_csv([(0, &state.trajectory, &state.momentum)]))?;
        Ok(())
    }
}

pub fn describe() -> String {
    registry()
        .values()
        .map(|f| {
            let c = f();
            format!("  {:<12} {}", c.name(), c.about())
        })
        .collect::<Vec<_>>()
        .join("\n")
}
