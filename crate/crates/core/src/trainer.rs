//! The alternating GAN training loop and the sweep harness.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{load_mnist_idx, sample_noise, sample_real, ImageDataset, ToyDistribution};
use crate::error::{Error, Result};
use crate::lipschitz::{domain_bound, gradient_penalty, lipschitz_upper_bound, GpConfig, SpectralNorm};
use crate::losses::{Interval, LossKind, LossSpec, Term};
use crate::metrics::{
    attained_gradient_interval, frechet_gaussian, median, mode_coverage, record_interval, DomainTrace, TraceRecord,
};
use crate::nn::{forward, forward_values, init_params, save_checkpoint, Activation, LayerVars, MlpConfig, ParamStore};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::tensor::Tensor;

/// Slack allowed on the live Theorem-1 check.
pub const BOUND_TOLERANCE: f64 = 1e-6;
/// Slack allowed on the live mean-value check of the gradient interval.
pub const COROLLARY_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerSpec {
    None,
    Sn {
        k_sn: f64,
        #[serde(default = "default_power_iters")]
        power_iters: usize,
    },
    Gp {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_k_gp")]
        k_gp: f64,
    },
}

fn default_power_iters() -> usize {
    1
}

fn default_lambda() -> f64 {
    GpConfig::default().lambda
}

fn default_k_gp() -> f64 {
    GpConfig::default().k_gp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Toy {
        distribution: ToyDistribution,
        /// Box that real samples are clamped to; it is also the input
        /// range used by the live domain bound.
        #[serde(default = "default_value_range")]
        value_range: [f64; 2],
    },
    Mnist {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
    },
}

fn default_value_range() -> [f64; 2] {
    [-1.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub loss: LossSpec,
    pub regularizer: RegularizerSpec,
    pub generator: MlpConfig,
    pub discriminator: MlpConfig,
    /// Shared settings; D and G keep separate running averages.
    #[serde(default)]
    pub optimizer: RmsPropConfig,
    pub data: DataSource,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_n_dis")]
    pub n_dis: usize,
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Metric evaluation period; 0 evaluates only after the last iteration.
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Mode-coverage radius; defaults to three standard deviations.
    #[serde(default)]
    pub coverage_radius: Option<f64>,
    /// Replace every loss term by its tangent at zero.
    #[serde(default)]
    pub linearize: bool,
}

fn default_latent_dim() -> usize {
    4
}

fn default_batch() -> usize {
    64
}

fn default_n_dis() -> usize {
    1
}

fn default_eval_samples() -> usize {
    2048
}

impl ExperimentConfig {
    /// Small dense nets on the 8-mode ring, NS loss, SN with `k_SN = 1`.
    ///
    /// The learning rate is 1e-3 rather than the image-scale 5e-5 so that
    /// a run converges well within the default budget.
    pub fn toy_ring() -> Self {
        ExperimentConfig {
            loss: LossSpec::unscaled(LossKind::Ns),
            regularizer: RegularizerSpec::Sn {
                k_sn: 1.0,
                power_iters: 1,
            },
            generator: MlpConfig::generator(vec![4, 32, 32, 2]),
            discriminator: MlpConfig::discriminator(vec![2, 32, 32, 32, 1]),
            optimizer: RmsPropConfig {
                lr: 1e-3,
                ..RmsPropConfig::default()
            },
            data: DataSource::Toy {
                distribution: ToyDistribution::GaussianRing {
                    modes: 8,
                    radius: 0.8,
                    std: 0.05,
                },
                value_range: default_value_range(),
            },
            latent_dim: default_latent_dim(),
            batch: default_batch(),
            n_dis: default_n_dis(),
            iterations: 20_000,
            seed: 0,
            eval_every: 0,
            eval_samples: default_eval_samples(),
            coverage_radius: None,
            linearize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.generator.validate()?;
        self.discriminator.validate_discriminator()?;
        if self.batch < 1 || self.n_dis < 1 || self.iterations < 1 || self.latent_dim < 1 {
            return Err(Error::Config(
                "batch, n_dis, iterations and latent_dim must all be at least 1".into(),
            ));
        }
        if self.generator.input_width() != self.latent_dim {
            return Err(Error::Config(format!(
                "generator input width {} differs from latent_dim {}",
                self.generator.input_width(),
                self.latent_dim
            )));
        }
        if self.generator.output_width() != self.discriminator.input_width() {
            return Err(Error::Config(format!(
                "generator emits {} values, discriminator expects {}",
                self.generator.output_width(),
                self.discriminator.input_width()
            )));
        }
        match self.regularizer {
            RegularizerSpec::None => {}
            RegularizerSpec::Sn { k_sn, power_iters } => {
                if !(k_sn > 0.0 && k_sn.is_finite()) || power_iters < 1 {
                    return Err(Error::Config(format!(
                        "SN needs k_sn > 0 and power_iters ≥ 1, got {k_sn} and {power_iters}"
                    )));
                }
            }
            RegularizerSpec::Gp { lambda, k_gp } => {
                if !(lambda >= 0.0) || !(k_gp >= 0.0) {
                    return Err(Error::Config(format!(
                        "GP needs lambda ≥ 0 and k_gp ≥ 0, got {lambda} and {k_gp}"
                    )));
                }
            }
        }
        if let DataSource::Toy {
            distribution,
            value_range,
        } = &self.data
        {
            distribution.validate()?;
            if !(value_range[0] < value_range[1]) {
                return Err(Error::Config(format!("empty value range {value_range:?}")));
            }
            if self.generator.output_width() != 2 {
                return Err(Error::Config("toy data is two-dimensional".into()));
            }
        }
        if let Some(r) = self.coverage_radius {
            if !(r > 0.0) {
                return Err(Error::Config(format!("coverage radius must be positive, got {r}")));
            }
        }
        Ok(())
    }

    pub fn k_sn(&self) -> Option<f64> {
        match self.regularizer {
            RegularizerSpec::Sn { k_sn, .. } => Some(k_sn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub frechet: f64,
    pub coverage: Option<usize>,
    pub hq_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub iteration: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub config: ExperimentConfig,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    /// Normalized discriminator weights as last used, when SN is active.
    pub discriminator_effective: Option<ParamStore>,
    pub trace: DomainTrace,
    pub metrics: Vec<MetricRecord>,
    /// Iterations whose domain width exceeded the live Theorem-1 bound.
    pub bound_violations: Vec<usize>,
    /// Iterations whose gradient interval exceeded the mean-value bound.
    pub corollary_violations: Vec<usize>,
    pub failure: Option<Failure>,
    /// Generated and real points from the last evaluation (toy data only).
    pub final_samples: Option<(Tensor, Tensor)>,
    pub wall_clock_secs: f64,
}

impl RunArtifacts {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn final_metrics(&self) -> Option<&MetricRecord> {
        self.metrics.last()
    }

    /// Median domain width over the last `fraction` of the trace.
    pub fn terminal_omega_width(&self, fraction: f64) -> Option<f64> {
        let n = self.trace.len();
        let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let widths: Vec<f64> = self.trace.records[n.saturating_sub(take)..]
            .iter()
            .map(|r| r.omega.width())
            .collect();
        median(&widths)
    }
}

/// Independent deterministic stream `tag` for a run seeded with `seed`.
pub fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

const STREAM_TRAIN: u64 = 1;
const STREAM_GP: u64 = 2;
const STREAM_SN: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_INIT_G: u64 = 5;
const STREAM_INIT_D: u64 = 6;

enum Sampler {
    Toy { dist: ToyDistribution, lo: f64, hi: f64 },
    Images(ImageDataset),
}

impl Sampler {
    fn new(source: &DataSource) -> Result<Self> {
        Ok(match source {
            DataSource::Toy {
                distribution,
                value_range,
            } => Sampler::Toy {
                dist: distribution.clone(),
                lo: value_range[0],
                hi: value_range[1],
            },
            DataSource::Mnist { images, labels } => Sampler::Images(load_mnist_idx(images, labels.as_deref())?),
        })
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match self {
            Sampler::Toy { dist, lo, hi } => Ok(sample_real(dist, n, rng)?.map(|v| v.clamp(*lo, *hi))),
            Sampler::Images(ds) => ds.sample(n, rng),
        }
    }

    fn input_shape(&self) -> Vec<usize> {
        match self {
            Sampler::Toy { .. } => vec![2],
            Sampler::Images(ds) => vec![ds.dims.0, ds.dims.1, ds.dims.2],
        }
    }

    fn value_range(&self) -> (f64, f64) {
        match self {
            Sampler::Toy { lo, hi, .. } => (*lo, *hi),
            Sampler::Images(_) => (-1.0, 1.0),
        }
    }
}

/// Range of generator outputs, if bounded.
fn generator_range(cfg: &MlpConfig) -> Option<(f64, f64)> {
    match cfg.output {
        Activation::Tanh => Some((-1.0, 1.0)),
        _ => None,
    }
}

fn loss_term<'t>(cfg: &ExperimentConfig, term: Term, scores: Var<'t>) -> Result<Var<'t>> {
    if cfg.linearize {
        cfg.loss.tangent_term_mean(term, scores)
    } else {
        cfg.loss.term_mean(term, scores)
    }
}

fn flat_scores(v: Var<'_>) -> Result<Var<'_>> {
    let b = v.shape()[0];
    v.reshape(vec![b])
}

fn effective_disc<'t>(
    tape: &'t Tape,
    layers: Vec<LayerVars<'t>>,
    sn: Option<&SpectralNorm>,
) -> Result<Vec<LayerVars<'t>>> {
    match sn {
        Some(sn) => sn.normalize_vars(tape, &layers),
        None => Ok(layers),
    }
}

struct DiscStep {
    grads: Vec<Tensor>,
    loss: f64,
    real_scores: Vec<f64>,
    fake_scores: Vec<f64>,
}

fn disc_step(
    cfg: &ExperimentConfig,
    d_params: &ParamStore,
    sn: Option<&SpectralNorm>,
    x_real: &Tensor,
    x_fake: &Tensor,
    gp_rng: &mut ChaCha8Rng,
) -> Result<DiscStep> {
    let tape = Tape::new();
    let raw = d_params.bind(&tape);
    let wrt = ParamStore::flatten_vars(&raw);
    let layers = effective_disc(&tape, raw.clone(), sn)?;
    let f_real = flat_scores(forward(&cfg.discriminator, &layers, tape.constant(x_real.clone()))?)?;
    let f_fake = flat_scores(forward(&cfg.discriminator, &layers, tape.constant(x_fake.clone()))?)?;
    let mut loss = loss_term(cfg, Term::Real, f_real)?.add(loss_term(cfg, Term::Fake, f_fake)?)?;
    if let RegularizerSpec::Gp { lambda, k_gp } = cfg.regularizer {
        let disc = |x| forward(&cfg.discriminator, &raw, x);
        let gp = gradient_penalty(&tape, disc, x_real, x_fake, &GpConfig { lambda, k_gp }, gp_rng)?;
        loss = loss.add(gp)?;
    }
    let loss_value = loss.item()?;
    let grads = if loss_value.is_finite() {
        tape.backward(loss, &wrt)?
    } else {
        Vec::new()
    };
    Ok(DiscStep {
        grads,
        loss: loss_value,
        real_scores: f_real.value().into_data(),
        fake_scores: f_fake.value().into_data(),
    })
}

fn gen_step(
    cfg: &ExperimentConfig,
    g_params: &ParamStore,
    d_params: &ParamStore,
    sn: Option<&SpectralNorm>,
    z: &Tensor,
) -> Result<(Vec<Tensor>, f64)> {
    let tape = Tape::new();
    let g_vars = g_params.bind(&tape);
    let wrt = ParamStore::flatten_vars(&g_vars);
    let d_layers = effective_disc(&tape, d_params.bind_constant(&tape), sn)?;
    let fake = forward(&cfg.generator, &g_vars, tape.constant(z.clone()))?;
    let scores = flat_scores(forward(&cfg.discriminator, &d_layers, fake)?)?;
    let loss = loss_term(cfg, Term::Gen, scores)?;
    let value = loss.item()?;
    let grads = if value.is_finite() {
        tape.backward(loss, &wrt)?
    } else {
        Vec::new()
    };
    Ok((grads, value))
}

struct Evaluation {
    record: MetricRecord,
    samples: Option<(Tensor, Tensor)>,
}

fn evaluate(
    cfg: &ExperimentConfig,
    sampler: &Sampler,
    g_params: &ParamStore,
    iter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation> {
    let n = cfg.eval_samples;
    let z = sample_noise(cfg.latent_dim, n, rng)?;
    let fake = forward_values(&cfg.generator, g_params, &z)?;
    let real = sampler.sample(n, rng)?;
    let frechet = if fake.is_finite() {
        frechet_gaussian(&real, &fake)?.distance
    } else {
        f64::NAN
    };
    let (coverage, hq, samples) = match sampler {
        Sampler::Toy { dist, .. } => {
            let radius = cfg.coverage_radius.unwrap_or(3.0 * dist.std());
            let c = if radius > 0.0 {
                Some(mode_coverage(&fake, &dist.centers(), radius)?)
            } else {
                None
            };
            (c.map(|c| c.covered), c.map(|c| c.hq_fraction), Some((fake, real)))
        }
        Sampler::Images(_) => (None, None, None),
    };
    Ok(Evaluation {
        record: MetricRecord {
            iter,
            frechet,
            coverage,
            hq_fraction: hq,
        },
        samples,
    })
}

/// Generator and discriminator weights a run with `cfg` starts from.
pub fn initial_params(cfg: &ExperimentConfig) -> Result<(ParamStore, ParamStore)> {
    Ok((
        init_params(&cfg.generator, stream_rng(cfg.seed, STREAM_INIT_G).next_u64())?,
        init_params(&cfg.discriminator, stream_rng(cfg.seed, STREAM_INIT_D).next_u64())?,
    ))
}

/// Runs one experiment.
///
/// Returns `Err` only for invalid configurations or unreadable data; a
/// non-finite loss or gradient stops training and is reported through
/// [`RunArtifacts::failure`] together with everything recorded so far.
pub fn train(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let started = Instant::now();
    let sampler = Sampler::new(&cfg.data)?;
    if sampler.input_shape().iter().product::<usize>() != cfg.discriminator.input_width() {
        return Err(Error::Config(format!(
            "data has {} values per sample, discriminator expects {}",
            sampler.input_shape().iter().product::<usize>(),
            cfg.discriminator.input_width()
        )));
    }
    let (mut g_params, mut d_params) = initial_params(cfg)?;
    let mut g_opt = RmsProp::new(cfg.optimizer, &g_params);
    let mut d_opt = RmsProp::new(cfg.optimizer, &d_params);
    let mut rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let mut gp_rng = stream_rng(cfg.seed, STREAM_GP);
    let mut eval_rng = stream_rng(cfg.seed, STREAM_EVAL);
    let mut sn = match cfg.regularizer {
        RegularizerSpec::Sn { k_sn, power_iters } => Some(SpectralNorm::new(
            &d_params,
            k_sn,
            power_iters,
            &mut stream_rng(cfg.seed, STREAM_SN),
        )?),
        _ => None,
    };
    // Inputs of D are real samples (clamped to the value range) and
    // generator outputs; the bound needs a box containing both.
    let bound_range = generator_range(&cfg.generator).map(|(glo, ghi)| {
        let (lo, hi) = sampler.value_range();
        (lo.min(glo), hi.max(ghi))
    });
    let input_shape = sampler.input_shape();

    let mut trace = DomainTrace::default();
    let mut metrics = Vec::new();
    let mut bound_violations = Vec::new();
    let mut corollary_violations = Vec::new();
    let mut failure = None;
    let mut final_samples = None;
    let mut d_effective = None;

    'outer: for iter in 0..cfg.iterations {
        let mut last = None;
        for _ in 0..cfg.n_dis {
            let x_real = sampler.sample(cfg.batch, &mut rng)?;
            let z = sample_noise(cfg.latent_dim, cfg.batch, &mut rng)?;
            let x_fake = forward_values(&cfg.generator, &g_params, &z)?;
            if let Some(sn) = sn.as_mut() {
                sn.update(&d_params)?;
            }
            let step = disc_step(cfg, &d_params, sn.as_ref(), &x_real, &x_fake, &mut gp_rng)?;
            if !step.loss.is_finite() {
                failure = Some(Failure {
                    iteration: iter,
                    reason: format!("discriminator loss {}", step.loss),
                });
                break 'outer;
            }
            // Bound check on the weights that produced these scores.
            let omega_bound = match (sn.as_ref(), bound_range) {
                (Some(sn), Some(range)) => {
                    let eff = sn.normalized_params(&d_params)?;
                    let k_hat = lipschitz_upper_bound(&eff, &cfg.discriminator);
                    d_effective = Some(eff);
                    Some(domain_bound(k_hat, &input_shape, range)?)
                }
                _ => None,
            };
            if let Err(e) = d_opt.step(&mut d_params, &step.grads, iter) {
                failure = Some(Failure {
                    iteration: iter,
                    reason: e.to_string(),
                });
                break 'outer;
            }
            last = Some((step, omega_bound));
        }
        let (step, omega_bound) = last.expect("n_dis ≥ 1");

        let z = sample_noise(cfg.latent_dim, cfg.batch, &mut rng)?;
        let (g_grads, loss_g) = gen_step(cfg, &g_params, &d_params, sn.as_ref(), &z)?;
        if !loss_g.is_finite() {
            failure = Some(Failure {
                iteration: iter,
                reason: format!("generator loss {loss_g}"),
            });
            break;
        }
        if let Err(e) = g_opt.step(&mut g_params, &g_grads, iter) {
            failure = Some(Failure {
                iteration: iter,
                reason: e.to_string(),
            });
            break;
        }

        let all: Vec<f64> = step.real_scores.iter().chain(&step.fake_scores).copied().collect();
        let omega = record_interval(&all)?;
        let psi = attained_gradient_interval(&cfg.loss, Term::Real, &all)?;
        let psi_fake = attained_gradient_interval(&cfg.loss, Term::Fake, &all)?;
        if let Some(b) = omega_bound {
            if omega.width() > b + BOUND_TOLERANCE {
                log::warn!("iteration {iter}: domain width {} exceeds bound {b}", omega.width());
                bound_violations.push(iter);
            }
        }
        if !cfg.linearize {
            let m = cfg.loss.second_derivative_max(Term::Real, omega)?;
            if psi.width() > m * omega.width() + COROLLARY_TOLERANCE {
                corollary_violations.push(iter);
            }
        }
        trace.push(TraceRecord {
            iter,
            omega,
            omega_real: record_interval(&step.real_scores)?,
            omega_fake: record_interval(&step.fake_scores)?,
            psi,
            psi_fake,
            loss_d: step.loss,
            loss_g,
            omega_bound,
        });

        let done = iter + 1 == cfg.iterations;
        if done || (cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0) {
            let ev = evaluate(cfg, &sampler, &g_params, iter + 1, &mut eval_rng)?;
            log::info!(
                "iter {}: frechet {:.4} coverage {:?} |Ω| {:.3e}",
                iter + 1,
                ev.record.frechet,
                ev.record.coverage,
                omega.width()
            );
            metrics.push(ev.record);
            final_samples = ev.samples;
        }
    }

    Ok(RunArtifacts {
        config: cfg.clone(),
        generator: g_params,
        discriminator: d_params,
        discriminator_effective: d_effective,
        trace,
        metrics,
        bound_violations,
        corollary_violations,
        failure,
        final_samples,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Hull of the per-iteration domains over the last `fraction` of a trace.
pub fn terminal_hull(trace: &DomainTrace, fraction: f64) -> Option<Interval> {
    let n = trace.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
    trace.records[n.saturating_sub(take)..]
        .iter()
        .map(|r| r.omega)
        .reduce(|a, b| a.hull(&b))
}

/// Per-iteration domains over the last `fraction` of a trace, summarized by
/// the median lower and the median upper endpoint.
pub fn terminal_median_domain(trace: &DomainTrace, fraction: f64) -> Option<Interval> {
    let n = trace.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
    let tail = &trace.records[n.saturating_sub(take)..];
    let lo = median(&tail.iter().map(|r| r.omega.lo).collect::<Vec<_>>())?;
    let hi = median(&tail.iter().map(|r| r.omega.hi).collect::<Vec<_>>())?;
    Some(Interval { lo, hi })
}

/// Result of [`calibrate_k_sn`]: the probe whose terminal domain came
/// closest to the requested width.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub k_sn: f64,
    pub omega: Interval,
    /// Every `(k_sn, width)` pair tried, in order.
    pub probes: Vec<(f64, f64)>,
    pub artifacts: RunArtifacts,
}

/// Searches `k_SN` so that the typical per-iteration domain over the last
/// tenth of training ([`terminal_median_domain`]) has width `target_width`
/// (within `rel_tol`).
///
/// The width grows roughly like `k_SN^n` for `n` layers, so the search is a
/// secant method on `log width` against `log k`, kept inside a bracket once
/// one is known.
pub fn calibrate_k_sn(
    base: &ExperimentConfig,
    target_width: f64,
    rel_tol: f64,
    max_probes: usize,
) -> Result<Calibration> {
    if !(target_width > 0.0) || max_probes == 0 {
        return Err(Error::Usage(
            "calibration needs a positive width and at least one probe".into(),
        ));
    }
    let power_iters = match base.regularizer {
        RegularizerSpec::Sn { power_iters, .. } => power_iters,
        _ => default_power_iters(),
    };
    let layers = base.discriminator.num_layers() as f64;
    let mut k = base.k_sn().unwrap_or(1.0);
    let (mut lo, mut hi): (Option<(f64, f64)>, Option<(f64, f64)>) = (None, None);
    let mut probes = Vec::new();
    let mut best: Option<(f64, Calibration)> = None;
    for _ in 0..max_probes {
        let mut cfg = base.clone();
        cfg.regularizer = RegularizerSpec::Sn { k_sn: k, power_iters };
        let art = train(&cfg)?;
        let hull = terminal_median_domain(&art.trace, 0.1).filter(|_| art.succeeded());
        let width = hull.map_or(f64::INFINITY, |h| h.width());
        probes.push((k, width));
        let miss = (width / target_width).ln().abs();
        if let Some(omega) = hull {
            if best.as_ref().is_none_or(|(m, _)| miss < *m) {
                best = Some((
                    miss,
                    Calibration {
                        k_sn: k,
                        omega,
                        probes: Vec::new(),
                        artifacts: art,
                    },
                ));
            }
        }
        if (width / target_width - 1.0).abs() <= rel_tol {
            break;
        }
        if width > target_width {
            hi = Some((k, width));
        } else {
            lo = Some((k, width));
        }
        let next = match (lo, hi) {
            (Some((k0, w0)), Some((k1, w1))) if w1.is_finite() && w0 > 0.0 => {
                let t = (target_width.ln() - w0.ln()) / (w1.ln() - w0.ln());
                let guess = (k0.ln() + t * (k1.ln() - k0.ln())).exp();
                // Fall back to bisection when the secant lands at an end.
                let (a, b) = (k0.min(k1), k0.max(k1));
                if guess > a * 1.001 && guess < b / 1.001 {
                    guess
                } else {
                    (k0 * k1).sqrt()
                }
            }
            (Some((k0, _)), Some((k1, _))) => (k0 * k1).sqrt(),
            _ if width.is_finite() && width > 0.0 => k * (target_width / width).powf(1.0 / layers).clamp(0.25, 4.0),
            _ if width > target_width => k / 2.0,
            _ => k * 2.0,
        };
        k = next;
    }
    let (_, mut cal) = best.ok_or_else(|| Error::Config("every calibration probe diverged".into()))?;
    cal.probes = probes;
    Ok(cal)
}

#[derive(Serialize)]
struct Summary<'a> {
    status: &'a str,
    failure: &'a Option<Failure>,
    iterations_completed: usize,
    bound_violations: usize,
    corollary_violations: usize,
    cumulative_omega: Option<Interval>,
    final_metrics: Option<&'a MetricRecord>,
    wall_clock_secs: f64,
}

/// Writes `config.json`, `trace.jsonl`, `metrics.csv`, `summary.json`,
/// `samples.csv` (toy data) and the two checkpoints into `dir`.
pub fn write_artifacts(art: &RunArtifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.json", serde_json::to_string_pretty(&art.config)? + "\n")?;
    art.trace.write_jsonl(&dir.join("trace.jsonl"))?;

    let mut csv = String::from("iter,frechet,coverage,hq_fraction\n");
    for m in &art.metrics {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            m.iter,
            m.frechet,
            opt(m.coverage.map(|c| c.to_string())),
            opt(m.hq_fraction.map(|h| h.to_string()))
        );
    }
    write("metrics.csv", csv)?;

    if let Some((fake, real)) = &art.final_samples {
        let mut csv = String::from("source,x,y\n");
        for (name, t) in [("generated", fake), ("real", real)] {
            for r in 0..t.rows() {
                let _ = writeln!(csv, "{name},{},{}", t.at(r, 0), t.at(r, 1));
            }
        }
        write("samples.csv", csv)?;
    }

    let summary = Summary {
        status: if art.succeeded() { "ok" } else { "failed" },
        failure: &art.failure,
        iterations_completed: art.trace.len(),
        bound_violations: art.bound_violations.len(),
        corollary_violations: art.corollary_violations.len(),
        cumulative_omega: art.trace.cumulative_hull(),
        final_metrics: art.final_metrics(),
        wall_clock_secs: art.wall_clock_secs,
    };
    write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;

    let iteration = art.trace.len();
    save_checkpoint(
        &dir.join("gen.ckpt"),
        &art.config.generator,
        &art.generator,
        art.config.seed,
        iteration,
    )?;
    save_checkpoint(
        &dir.join("disc.ckpt"),
        &art.config.discriminator,
        &art.discriminator,
        art.config.seed,
        iteration,
    )?;
    Ok(())
}

/// Cartesian grid of sweep cells; every cell is run once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub losses: Vec<LossKind>,
    pub alphas: Vec<f64>,
    /// Empty keeps the base regularizer.
    #[serde(default)]
    pub k_sn: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() || self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        Ok(())
    }

    /// `(loss, alpha, k_sn)` cells in row-major order.
    pub fn cells(&self) -> Vec<(LossKind, f64, Option<f64>)> {
        let ks: Vec<Option<f64>> = if self.k_sn.is_empty() {
            vec![None]
        } else {
            self.k_sn.iter().map(|&k| Some(k)).collect()
        };
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &alpha in &self.alphas {
                for &k in &ks {
                    out.push((loss, alpha, k));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossKind,
    pub alpha: f64,
    pub k_sn: Option<f64>,
    pub seed: u64,
    pub frechet: Option<f64>,
    pub coverage: Option<usize>,
    pub hq_fraction: Option<f64>,
    /// `ok`, `nan@<iteration>` or `error`.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub loss: LossKind,
    pub alpha: f64,
    pub k_sn: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub frechet_median: Option<f64>,
    pub coverage_median: Option<f64>,
    pub hq_fraction_median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
}

pub const SWEEP_HEADER: &str = "loss,alpha,k_sn,seed,frechet,coverage,hq_fraction,status";

/// Applies one sweep cell to a base configuration.
pub fn cell_config(
    base: &ExperimentConfig,
    loss: LossKind,
    alpha: f64,
    k_sn: Option<f64>,
    seed: u64,
) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.loss = LossSpec { kind: loss, alpha };
    cfg.seed = seed;
    if let Some(k) = k_sn {
        let power_iters = match base.regularizer {
            RegularizerSpec::Sn { power_iters, .. } => power_iters,
            _ => default_power_iters(),
        };
        cfg.regularizer = RegularizerSpec::Sn { k_sn: k, power_iters };
    }
    cfg
}

/// Worker count for sweeps: `LIPGAN_THREADS` if set, else all cores.
pub fn sweep_threads() -> usize {
    std::env::var("LIPGAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run_row(base: &ExperimentConfig, loss: LossKind, alpha: f64, k_sn: Option<f64>, seed: u64) -> SweepRow {
    let cfg = cell_config(base, loss, alpha, k_sn, seed);
    let mut row = SweepRow {
        loss,
        alpha,
        k_sn,
        seed,
        frechet: None,
        coverage: None,
        hq_fraction: None,
        status: "ok".into(),
    };
    match train(&cfg) {
        Ok(art) => {
            if let Some(f) = &art.failure {
                row.status = format!("nan@{}", f.iteration);
            } else if let Some(m) = art.final_metrics() {
                row.frechet = Some(m.frechet);
                row.coverage = m.coverage;
                row.hq_fraction = m.hq_fraction;
            }
        }
        Err(e) => {
            log::warn!("sweep cell {loss}/{alpha}/{k_sn:?}/{seed} failed: {e}");
            row.status = "error".into();
        }
    }
    row
}

/// Runs every cell of `grid` over `base` in parallel and aggregates medians
/// over seeds. Failed runs are recorded and the sweep continues.
pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepResult> {
    grid.validate()?;
    base.validate()?;
    let jobs: Vec<_> = grid
        .cells()
        .into_iter()
        .flat_map(|(l, a, k)| grid.seeds.iter().map(move |&s| (l, a, k, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| jobs.par_iter().map(|&(l, a, k, s)| run_row(base, l, a, k, s)).collect());

    let summary = grid
        .cells()
        .into_iter()
        .map(|(loss, alpha, k_sn)| {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.loss == loss && r.alpha == alpha && r.k_sn == k_sn)
                .collect();
            let ok: Vec<&&SweepRow> = cell.iter().filter(|r| r.status == "ok").collect();
            let med =
                |f: &dyn Fn(&SweepRow) -> Option<f64>| median(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SweepSummaryRow {
                loss,
                alpha,
                k_sn,
                runs: cell.len(),
                failed: cell.len() - ok.len(),
                frechet_median: med(&|r| r.frechet),
                coverage_median: med(&|r| r.coverage.map(|c| c as f64)),
                hq_fraction_median: med(&|r| r.hq_fraction),
            }
        })
        .collect();
    Ok(SweepResult { rows, summary })
}

fn opt_num<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.loss,
                r.alpha,
                opt_num(r.k_sn),
                r.seed,
                opt_num(r.frechet),
                opt_num(r.coverage),
                opt_num(r.hq_fraction),
                r.status
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("loss,alpha,k_sn,runs,failed,frechet_median,coverage_median,hq_fraction_median\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.loss,
                r.alpha,
                opt_num(r.k_sn),
                r.runs,
                r.failed,
                opt_num(r.frechet_median),
                opt_num(r.coverage_median),
                opt_num(r.hq_fraction_median)
            );
        }
        s
    }
}
