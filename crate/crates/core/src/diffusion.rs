//! Variance schedules, timestep selection, Gaussian latent sampling, and the
//! one-shot reparameterized estimate of the clean latent.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LatentTensor, Shape, Tensor3};

pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled-linear" | "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Which end of the denoising trajectory the timestep window sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowEnd {
    /// Final denoising steps: the smallest training timesteps.
    #[default]
    LowNoise,
    HighNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
    /// Inference step index -> training timestep, ascending.
    inference_timesteps: Vec<usize>,
}

pub fn make_schedule(
    kind: ScheduleKind,
    train_steps: usize,
    inference_steps: usize,
) -> Result<DiffusionSchedule> {
    if train_steps == 0 {
        return Err(Error::invalid("train_steps must be at least 1"));
    }
    let betas = match kind {
        ScheduleKind::Linear => linspace(DEFAULT_BETA_START, DEFAULT_BETA_END, train_steps),
        ScheduleKind::ScaledLinear => {
            linspace(DEFAULT_BETA_START.sqrt(), DEFAULT_BETA_END.sqrt(), train_steps)
                .into_iter()
                .map(|b| b * b)
                .collect()
        }
    };
    DiffusionSchedule::from_betas(betas, inference_steps)
}

/// Parses the kind identifier, then builds as [`make_schedule`].
pub fn make_schedule_named(kind: &str, train_steps: usize, inference_steps: usize) -> Result<DiffusionSchedule> {
    make_schedule(kind.parse()?, train_steps, inference_steps)
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit betas with uniformly spaced inference
    /// timesteps `i * (T / steps)`.
    pub fn from_betas(betas: Vec<f64>, inference_steps: usize) -> Result<Self> {
        let train_steps = betas.len();
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::invalid(format!(
                "need 1 <= inference_steps ({inference_steps}) <= train_steps ({train_steps})"
            )));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        let ratio = train_steps / inference_steps;
        let inference_timesteps = (0..inference_steps).map(|i| i * ratio).collect();
        Ok(Self { betas, alphas_cumprod, inference_timesteps })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn inference_steps(&self) -> usize {
        self.inference_timesteps.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn inference_timesteps(&self) -> &[usize] {
        &self.inference_timesteps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            Error::invalid(format!("timestep {t} outside schedule of {} steps", self.train_steps()))
        })
    }

    /// The `window` candidate training timesteps at the chosen end of the
    /// inference map.
    pub fn window(&self, window: usize, end: WindowEnd) -> Result<&[usize]> {
        let n = self.inference_steps();
        if window == 0 || window > n {
            return Err(Error::invalid(format!(
                "timestep window {window} must lie in 1..={n}"
            )));
        }
        Ok(match end {
            WindowEnd::LowNoise => &self.inference_timesteps[..window],
            WindowEnd::HighNoise => &self.inference_timesteps[n - window..],
        })
    }
}

/// Uniform draw over the timestep window.
pub fn sample_timestep<R: Rng + ?Sized>(
    sched: &DiffusionSchedule,
    window: usize,
    end: WindowEnd,
    rng: &mut R,
) -> Result<usize> {
    let candidates = sched.window(window, end)?;
    Ok(candidates[rng.random_range(0..candidates.len())])
}

pub fn sample_latent_frames<R: Rng + ?Sized>(
    frames: usize,
    shape: Shape,
    rng: &mut R,
) -> Result<Vec<LatentTensor>> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be at least 1"));
    }
    Ok((0..frames)
        .map(|_| Tensor3::from_fn(shape, |_, _, _| rng.sample(StandardNormal)))
        .collect())
}

/// `z_t = sqrt(abar) z_0 + sqrt(1 - abar) eps`
pub fn add_noise(z0: &LatentTensor, eps: &LatentTensor, t: usize, sched: &DiffusionSchedule) -> Result<LatentTensor> {
    let abar = sched.alpha_bar(t)?;
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// `z0 = (z_t - sqrt(1 - abar) eps) / sqrt(abar)`
pub fn estimate_z0(z_t: &LatentTensor, eps: &LatentTensor, t: usize, sched: &DiffusionSchedule) -> Result<LatentTensor> {
    estimate_z0_with_alpha_bar(z_t, eps, sched.alpha_bar(t)?)
}

pub fn estimate_z0_with_alpha_bar(z_t: &LatentTensor, eps: &LatentTensor, alpha_bar: f64) -> Result<LatentTensor> {
    if !(alpha_bar > 0.0) {
        return Err(Error::Singular(format!("alpha_bar = {alpha_bar} admits no clean-latent estimate")));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z_t.zip_map(eps, |z, e| (z - b * e) / a)
}
