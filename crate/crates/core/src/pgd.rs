//! Momentum sign ascent under an L-infinity budget.
//!
//! Each iteration samples a transform, a timestep, and noisy latent frames,
//! evaluates the objective on the transformed `x + delta`, folds the
//! normalized gradient into the momentum buffer, and takes a projected sign
//! step. Randomness comes from one root seed split into independent streams,
//! so disabling one source leaves the others unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, sample_latent_frames, sample_timestep, DiffusionSchedule, ScheduleKind, WindowEnd};
use crate::eot::{apply_transform, sample_transform, transform_vjp, EotConfig, TransformSpec};
use crate::error::{Error, Result};
use crate::extractors::ExtractorBundle;
use crate::losses::{CleanFeatures, LossBreakdown, LossWeights, Objective};
use crate::tensor::{clamp_valid, linf_norm, linf_project, ImageTensor, PerturbationField, Shape, Tensor3};

/// Stream identifiers under the root seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_EOT: u64 = 1;
pub const STREAM_TIMESTEP: u64 = 2;
pub const STREAM_LATENT: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub train_steps: usize,
    pub inference_steps: usize,
    /// Number of inference timesteps the sampler draws from.
    pub window: usize,
    pub window_end: WindowEnd,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::ScaledLinear,
            train_steps: 1000,
            inference_steps: 25,
            window: 10,
            window_end: WindowEnd::LowNoise,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        let sched = make_schedule(self.kind, self.train_steps, self.inference_steps)?;
        sched.window(self.window, self.window_end)?;
        Ok(sched)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectionConfig {
    /// L-infinity budget.
    pub eta: f64,
    /// Sign step size.
    pub gamma: f64,
    pub iterations: usize,
    /// Momentum decay.
    pub decay: f64,
    pub weights: LossWeights,
    /// Number of noisy latent frames per iteration.
    pub frames: usize,
    pub seed: u64,
    pub eot: EotConfig,
    pub schedule: ScheduleConfig,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        Self {
            eta: 16.0 / 255.0,
            gamma: 2.0 / 255.0,
            iterations: 200,
            decay: 0.5,
            weights: LossWeights::default(),
            frames: 5,
            seed: 0,
            eot: EotConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl ProtectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("budget must be positive, got {}", self.eta)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.gamma)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::invalid(format!("decay must be non-negative, got {}", self.decay)));
        }
        if self.frames == 0 {
            return Err(Error::invalid("frames must be at least 1"));
        }
        self.weights.validate()?;
        self.eot.validate()?;
        self.schedule.build()?;
        Ok(())
    }
}

/// One optimization step. The loss is measured at the perturbation before
/// the step; `linf` after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub breakdown: LossBreakdown,
    pub linf: f64,
    pub transform: TransformSpec,
    pub timestep: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub eta: f64,
    pub iterations: usize,
    pub seed: u64,
    pub records: Vec<IterationRecord>,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Running maximum of the total objective.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.records
            .iter()
            .map(|r| {
                best = best.max(r.breakdown.total);
                best
            })
            .collect()
    }

    /// One JSON object per iteration followed by `metadata` as the last line.
    pub fn to_jsonl(&self, metadata: &serde_json::Value) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(metadata)?);
        out.push('\n');
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Protection {
    /// `clamp(x + delta, 0, 1)`
    pub protected: ImageTensor,
    pub delta: PerturbationField,
    pub trace: OptimizationTrace,
}

/// Elementwise uniform on `[-eta, eta]`.
pub fn init_perturbation<R: Rng + ?Sized>(eta: f64, shape: Shape, rng: &mut R) -> Result<PerturbationField> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("budget must be non-negative, got {eta}")));
    }
    if eta == 0.0 {
        return Ok(PerturbationField::zeros(shape));
    }
    Ok(PerturbationField::from_tensor(Tensor3::from_fn(shape, |_, _, _| rng.random_range(-eta..=eta))))
}

/// `mu * g_prev + grad / mean(|grad|)`; the normalized term is zero when the
/// gradient vanishes.
pub fn momentum_step(g_prev: &Tensor3, grad: &Tensor3, mu: f64) -> Result<Tensor3> {
    g_prev.ensure_same_shape(grad, "momentum buffer vs gradient")?;
    let m = grad.mean_abs();
    if m == 0.0 {
        return Ok(g_prev.scale(mu));
    }
    g_prev.zip_map(grad, |p, g| mu * p + g / m)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(delta + gamma * sign(g), -eta, eta)` with `sign(0) = 0`.
pub fn pgd_update(delta: &PerturbationField, g: &Tensor3, gamma: f64, eta: f64) -> Result<PerturbationField> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {gamma}")));
    }
    let stepped = delta.tensor().zip_map(g, |d, gi| d + gamma * sign(gi))?;
    linf_project(&PerturbationField::from_tensor(stepped), eta)
}

pub fn protect(x: &ImageTensor, cfg: &ProtectionConfig, bundle: &ExtractorBundle) -> Result<Protection> {
    protect_with_observer(x, cfg, bundle, |_, _| {})
}

/// Like [`protect`], calling `observer` with the perturbation after every
/// step.
pub fn protect_with_observer(
    x: &ImageTensor,
    cfg: &ProtectionConfig,
    bundle: &ExtractorBundle,
    mut observer: impl FnMut(&IterationRecord, &PerturbationField),
) -> Result<Protection> {
    cfg.validate()?;
    let sched = cfg.schedule.build()?;
    let latent_shape = bundle.encoder.latent_shape(x.shape())?;
    let clean = CleanFeatures::compute(x, bundle)?;
    let objective = Objective { bundle, weights: &cfg.weights, schedule: &sched, frames: cfg.frames };

    let mut init_rng = stream_rng(cfg.seed, STREAM_INIT);
    let mut eot_rng = stream_rng(cfg.seed, STREAM_EOT);
    let mut t_rng = stream_rng(cfg.seed, STREAM_TIMESTEP);
    let mut latent_rng = stream_rng(cfg.seed, STREAM_LATENT);

    let mut delta = init_perturbation(cfg.eta, x.shape(), &mut init_rng)?;
    let mut g = Tensor3::zeros(x.shape());
    let mut records = Vec::with_capacity(cfg.iterations);

    for iteration in 1..=cfg.iterations {
        let at = |e: Error| Error::Iteration { iteration, source: Box::new(e) };
        let released = x.perturbed(&delta)?;
        let spec = sample_transform(&mut eot_rng, &cfg.eot);
        let view = apply_transform(&spec, &released).map_err(at)?;
        let t = sample_timestep(&sched, cfg.schedule.window, cfg.schedule.window_end, &mut t_rng)?;
        let noise = sample_latent_frames(cfg.frames, latent_shape, &mut latent_rng)?;

        let ev = objective.evaluate(&clean, &view, &released, t, &noise, true).map_err(at)?;
        if !ev.breakdown.is_finite() {
            return Err(Error::NonFinite { iteration, breakdown: Box::new(ev.breakdown) });
        }
        let grad_view = ev.grad_view.expect("gradient requested");
        let mut grad = transform_vjp(&spec, &released, &grad_view).map_err(at)?;
        grad.axpy(1.0, &ev.grad_released.expect("gradient requested"))?;
        if !grad.is_finite() {
            return Err(Error::NonFinite { iteration, breakdown: Box::new(ev.breakdown) });
        }

        g = momentum_step(&g, &grad, cfg.decay)?;
        delta = pgd_update(&delta, &g, cfg.gamma, cfg.eta)?;

        let record = IterationRecord { iteration, breakdown: ev.breakdown, linf: linf_norm(&delta), transform: spec, timestep: t };
        log::debug!("iteration {iteration}: total {:.6e}, linf {:.6}", record.breakdown.total, record.linf);
        observer(&record, &delta);
        records.push(record);
    }

    let protected = clamp_valid(&x.perturbed(&delta)?);
    Ok(Protection {
        protected,
        delta,
        trace: OptimizationTrace { eta: cfg.eta, iterations: cfg.iterations, seed: cfg.seed, records },
    })
}
