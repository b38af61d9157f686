//! A toy image-to-video pipeline for exercising the evaluation path without
//! pretrained models: encode the image, noise the latent once per frame,
//! denoise in one step with the bundle's noise predictor, decode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{add_noise, estimate_z0, sample_latent_frames, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::extractors::toy::ToyDecoder;
use crate::extractors::{Conditioning, ExtractorBundle};
use crate::pgd::ScheduleConfig;
use crate::tensor::{FrameSequence, ImageTensor};

pub const DEFAULT_ANIMATION_FRAMES: usize = 16;

pub struct ToyAnimator {
    bundle: ExtractorBundle,
    decoder: ToyDecoder,
    schedule: DiffusionSchedule,
    timestep: usize,
    frames: usize,
}

impl ToyAnimator {
    /// Uses the sixth inference timestep of the default schedule.
    pub fn new(bundle: ExtractorBundle, seed: u64) -> Result<Self> {
        let schedule = ScheduleConfig::default().build()?;
        let timestep = schedule.inference_timesteps()[5];
        let decoder = ToyDecoder::new(seed, bundle.encoder.latent_channels());
        Ok(Self { bundle, decoder, schedule, timestep, frames: DEFAULT_ANIMATION_FRAMES })
    }

    pub fn frames(mut self, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("an animation needs at least one frame"));
        }
        self.frames = frames;
        Ok(self)
    }

    pub fn timestep(mut self, t: usize) -> Result<Self> {
        self.schedule.alpha_bar(t)?;
        self.timestep = t;
        Ok(self)
    }

    pub fn animate(&self, image: &ImageTensor, noise_seed: u64) -> Result<FrameSequence> {
        let b = &self.bundle;
        let z = b.encoder.encode(image)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let eps = sample_latent_frames(self.frames, z.shape(), &mut rng)?;
        let noisy = eps.iter().map(|e| add_noise(&z, e, self.timestep, &self.schedule)).collect::<Result<Vec<_>>>()?;
        let cond = Conditioning { reference: z.clone(), poses: b.pose.condition_from(image, self.frames)? };
        let predicted = b.noise_predictor.predict(&noisy, &cond, self.timestep)?;
        let frames = noisy
            .iter()
            .zip(&predicted)
            .map(|(zt, e)| self.decoder.decode(&estimate_z0(zt, e, self.timestep, &self.schedule)?))
            .collect::<Result<Vec<_>>>()?;
        FrameSequence::new(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractors::build_toy_stack;

    #[test]
    fn deterministic_and_shaped() {
        let a = ToyAnimator::new(build_toy_stack(0, 4).unwrap(), 0).unwrap();
        let img = ImageTensor::filled(16, 12, 0.4).unwrap();
        let v = a.animate(&img, 1).unwrap();
        assert_eq!(v.len(), DEFAULT_ANIMATION_FRAMES);
        assert_eq!(v.shape(), img.shape());
        assert_eq!(v, a.animate(&img, 1).unwrap());
        assert_ne!(v, a.animate(&img, 2).unwrap());
        assert!(v.frames().iter().all(ImageTensor::is_valid));
    }

    #[test]
    fn options_validated() {
        let a = ToyAnimator::new(build_toy_stack(0, 4).unwrap(), 0).unwrap();
        assert!(a.frames(0).is_err());
        let a = ToyAnimator::new(build_toy_stack(0, 4).unwrap(), 0).unwrap();
        assert!(a.timestep(5000).is_err());
    }
}
