//! Contracts for the pretrained surrogates the optimizer differentiates
//! through, a registry that binds names to implementations, and a seeded toy
//! stack for desk-scale runs.
//!
//! Every role exposes a vector-Jacobian product (`*_vjp`): given the gradient
//! of some scalar with respect to the role's output, it returns the gradient
//! with respect to the role's image or latent input. Implementations that
//! wrap non-differentiable components (a keypoint detector, say) may return a
//! zero field, and should say so in their documentation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, LatentTensor, Shape, Tensor3};

mod registry;
pub mod toy;

pub use registry::{ExtractorsConfig, Registry, RoleSpec};

/// Input normalization an extractor applies at its own boundary. Callers
/// always pass `[0, 1]` images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRange {
    UnitInterval,
    /// `2x - 1`
    Symmetric,
    /// Per-channel mean/std standardization.
    Standardized,
}

pub trait LatentEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn latent_channels(&self) -> usize;
    fn latent_shape(&self, image: Shape) -> Result<Shape>;
    fn input_range(&self) -> InputRange;
    fn encode(&self, image: &ImageTensor) -> Result<LatentTensor>;
    fn encode_vjp(&self, image: &ImageTensor, grad: &LatentTensor) -> Result<Tensor3>;
    /// Identical inputs give identical outputs.
    fn deterministic(&self) -> bool {
        true
    }
}

/// Image-level semantic embedder. Owns its resize to the working resolution,
/// and gradients flow through that resize.
pub trait SemanticEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn embedding_dim(&self) -> usize;
    fn working_resolution(&self) -> (usize, usize);
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
    fn embed_vjp(&self, image: &ImageTensor, grad: &[f64]) -> Result<Tensor3>;
    fn deterministic(&self) -> bool {
        true
    }
}

/// Fine-grained appearance features computed from a latent.
pub trait ReferenceFeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn input_channels(&self) -> usize;
    fn extract(&self, latent: &LatentTensor) -> Result<Vec<Tensor3>>;
    /// `grads` holds one gradient per exposed feature map.
    fn extract_vjp(&self, latent: &LatentTensor, grads: &[Tensor3]) -> Result<LatentTensor>;
    fn deterministic(&self) -> bool {
        true
    }
}

/// Reference-image conditioning for the noise predictor: the reference latent
/// plus one pose map per generated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub reference: LatentTensor,
    pub poses: Vec<Tensor3>,
}

/// Gradient with respect to each part of a [`Conditioning`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningGrad {
    pub reference: LatentTensor,
    pub poses: Vec<Tensor3>,
}

/// Epsilon-prediction denoiser over `F` frames.
pub trait NoisePredictor: Send + Sync {
    fn name(&self) -> &str;
    fn latent_channels(&self) -> usize;
    fn pose_channels(&self) -> usize;
    fn predict(&self, noisy: &[LatentTensor], cond: &Conditioning, t: usize) -> Result<Vec<LatentTensor>>;
    /// Gradient with respect to the conditioning only; the noisy latents are
    /// sampled constants in every caller.
    fn predict_vjp(
        &self,
        noisy: &[LatentTensor],
        cond: &Conditioning,
        t: usize,
        grad: &[LatentTensor],
    ) -> Result<ConditioningGrad>;
    fn deterministic(&self) -> bool {
        true
    }
}

/// Pose extracted from an image, repeated once per frame.
pub trait PoseConditioner: Send + Sync {
    fn name(&self) -> &str;
    fn pose_channels(&self) -> usize;
    fn condition_from(&self, image: &ImageTensor, repeats: usize) -> Result<Vec<Tensor3>>;
    fn condition_vjp(&self, image: &ImageTensor, grads: &[Tensor3]) -> Result<Tensor3>;
    fn deterministic(&self) -> bool {
        true
    }
}

/// Symmetric perceptual distance with `d(a, a) = 0`.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64>;
    /// Gradient of `distance(a, b)` with respect to `a`.
    fn distance_grad(&self, a: &ImageTensor, b: &ImageTensor) -> Result<Tensor3>;
    fn deterministic(&self) -> bool {
        true
    }
}

/// Which implementation was bound to each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub encoder: String,
    pub semantic: String,
    pub references: Vec<String>,
    pub noise_predictor: String,
    pub pose: String,
    pub perceptual: String,
}

/// The full surrogate set, immutable once built.
#[derive(Clone)]
pub struct ExtractorBundle {
    pub encoder: Arc<dyn LatentEncoder>,
    pub semantic: Arc<dyn SemanticEncoder>,
    pub references: Vec<Arc<dyn ReferenceFeatureExtractor>>,
    pub noise_predictor: Arc<dyn NoisePredictor>,
    pub pose: Arc<dyn PoseConditioner>,
    pub perceptual: Arc<dyn PerceptualDistance>,
}

impl std::fmt::Debug for ExtractorBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExtractorBundle").field("roles", &self.record()).finish()
    }
}

impl ExtractorBundle {
    /// Assembles a bundle after checking the channel contracts between roles.
    pub fn new(
        encoder: Arc<dyn LatentEncoder>,
        semantic: Arc<dyn SemanticEncoder>,
        references: Vec<Arc<dyn ReferenceFeatureExtractor>>,
        noise_predictor: Arc<dyn NoisePredictor>,
        pose: Arc<dyn PoseConditioner>,
        perceptual: Arc<dyn PerceptualDistance>,
    ) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::Configuration("at least one reference extractor is required".into()));
        }
        let c = encoder.latent_channels();
        for r in &references {
            if r.input_channels() != c {
                return Err(Error::Configuration(format!(
                    "reference extractor `{}` expects {} latent channels, encoder `{}` produces {c}",
                    r.name(),
                    r.input_channels(),
                    encoder.name()
                )));
            }
        }
        if noise_predictor.latent_channels() != c {
            return Err(Error::Configuration(format!(
                "noise predictor `{}` expects {} latent channels, encoder `{}` produces {c}",
                noise_predictor.name(),
                noise_predictor.latent_channels(),
                encoder.name()
            )));
        }
        if noise_predictor.pose_channels() != pose.pose_channels() {
            return Err(Error::Configuration(format!(
                "noise predictor `{}` expects {} pose channels, pose conditioner `{}` produces {}",
                noise_predictor.name(),
                noise_predictor.pose_channels(),
                pose.name(),
                pose.pose_channels()
            )));
        }
        Ok(Self { encoder, semantic, references, noise_predictor, pose, perceptual })
    }

    pub fn record(&self) -> ResolutionRecord {
        ResolutionRecord {
            encoder: self.encoder.name().to_string(),
            semantic: self.semantic.name().to_string(),
            references: self.references.iter().map(|r| r.name().to_string()).collect(),
            noise_predictor: self.noise_predictor.name().to_string(),
            pose: self.pose.name().to_string(),
            perceptual: self.perceptual.name().to_string(),
        }
    }

    pub fn reference_count(&self) -> usize {
        self.references.len()
    }

    /// True when every role declares deterministic inference.
    pub fn deterministic(&self) -> bool {
        self.encoder.deterministic()
            && self.semantic.deterministic()
            && self.references.iter().all(|r| r.deterministic())
            && self.noise_predictor.deterministic()
            && self.pose.deterministic()
            && self.perceptual.deterministic()
    }
}

/// The built-in toy bundle: three reference extractors over 4-channel latents.
pub fn build_toy_stack(seed: u64, latent_channels: usize) -> Result<ExtractorBundle> {
    toy::ToyStackBuilder::new(seed).latent_channels(latent_channels).build()
}
