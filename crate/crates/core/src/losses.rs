//! The protection objective: latent deviation, feature misextraction, frame
//! incoherence, and the perceptual-budget hinge, plus their weighted sum and
//! its gradient with respect to the perturbation.
//!
//! Every squared distance uses a per-element mean, so the default weights do
//! not depend on image resolution.

use serde::{Deserialize, Serialize};

use crate::diffusion::{estimate_z0_with_alpha_bar, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::extractors::{
    Conditioning, ExtractorBundle, LatentEncoder, NoisePredictor, PerceptualDistance, PoseConditioner,
    ReferenceFeatureExtractor, SemanticEncoder,
};
use crate::tensor::{mse, mse_grad, ImageTensor, LatentTensor, PerturbationField, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_vae: f64,
    pub lambda_clip: f64,
    pub lambda_ref: f64,
    pub lambda_frame: f64,
    pub lambda_lpips: f64,
    /// Perceptual budget below which the hinge is inactive.
    pub zeta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_vae: 10.0,
            lambda_clip: 10.0,
            lambda_ref: 100.0,
            lambda_frame: 1.0,
            lambda_lpips: 10.0,
            zeta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_vae", self.lambda_vae),
            ("lambda_clip", self.lambda_clip),
            ("lambda_ref", self.lambda_ref),
            ("lambda_frame", self.lambda_frame),
            ("lambda_lpips", self.lambda_lpips),
            ("zeta", self.zeta),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Only the latent-deviation term.
    pub fn vae_only(lambda_vae: f64) -> Self {
        Self {
            lambda_vae,
            lambda_clip: 0.0,
            lambda_ref: 0.0,
            lambda_frame: 0.0,
            lambda_lpips: 0.0,
            zeta: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vae: f64,
    pub clip: f64,
    pub reference: f64,
    pub frame: f64,
    pub lpips_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(vae: f64, clip: f64, reference: f64, frame: f64, lpips_penalty: f64, w: &LossWeights) -> Self {
        let total = w.lambda_vae * vae + w.lambda_clip * clip + w.lambda_ref * reference
            + w.lambda_frame * frame
            - w.lambda_lpips * lpips_penalty;
        Self { vae, clip, reference, frame, lpips_penalty, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.vae, self.clip, self.reference, self.frame, self.lpips_penalty, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean squared distance between two embeddings.
fn vec_mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("embedding lengths {} vs {}", a.len(), b.len())));
    }
    let n = a.len().max(1) as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean squared distance over the concatenation of all feature maps.
fn maps_mse(a: &[Tensor3], b: &[Tensor3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} feature maps vs {}", a.len(), b.len())));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        sum += mse(x, y)? * x.len() as f64;
        count += x.len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn maps_mse_grad(a: &[Tensor3], b: &[Tensor3], scale: f64) -> Result<Vec<Tensor3>> {
    let count: usize = a.iter().map(Tensor3::len).sum();
    let k = 2.0 * scale / count.max(1) as f64;
    a.iter().zip(b).map(|(x, y)| x.zip_map(y, |p, q| k * (p - q))).collect()
}

pub fn loss_vae(x: &ImageTensor, delta: &PerturbationField, enc: &dyn LatentEncoder) -> Result<f64> {
    let xp = x.perturbed(delta)?;
    mse(&enc.encode(&xp)?, &enc.encode(x)?)
}

/// `(clip_term, ref_term)`; the reference term sums over the ensemble.
pub fn loss_feature(
    x: &ImageTensor,
    delta: &PerturbationField,
    sem: &dyn SemanticEncoder,
    refs: &[&dyn ReferenceFeatureExtractor],
    enc: &dyn LatentEncoder,
) -> Result<(f64, f64)> {
    if refs.is_empty() {
        return Err(Error::invalid("feature loss needs at least one reference extractor"));
    }
    let xp = x.perturbed(delta)?;
    let clip = vec_mse(&sem.embed(&xp)?, &sem.embed(x)?)?;
    let (zp, z) = (enc.encode(&xp)?, enc.encode(x)?);
    let mut reference = 0.0;
    for r in refs {
        reference += maps_mse(&r.extract(&zp)?, &r.extract(&z)?)?;
    }
    Ok((clip, reference))
}

/// Clean-latent estimates `z0^f` for every noisy frame, conditioned on the
/// given image.
pub fn estimate_frames(
    image: &ImageTensor,
    enc: &dyn LatentEncoder,
    pred: &dyn NoisePredictor,
    cond: &dyn PoseConditioner,
    sched: &DiffusionSchedule,
    t: usize,
    noise_frames: &[LatentTensor],
) -> Result<Vec<LatentTensor>> {
    let reference = enc.encode(image)?;
    let poses = cond.condition_from(image, noise_frames.len())?;
    let conditioning = Conditioning { reference, poses };
    let eps = pred.predict(noise_frames, &conditioning, t)?;
    let abar = sched.alpha_bar(t)?;
    noise_frames
        .iter()
        .zip(&eps)
        .map(|(z, e)| estimate_z0_with_alpha_bar(z, e, abar))
        .collect()
}

/// `(alignment, pairwise)` parts of the frame-incoherence term for a set of
/// clean-latent estimates against the reference latent.
pub fn frame_terms(estimates: &[LatentTensor], reference: &LatentTensor) -> Result<(f64, f64)> {
    let f = estimates.len();
    if f == 0 {
        return Err(Error::invalid("frame loss needs at least one frame"));
    }
    let mut align = 0.0;
    for z in estimates {
        align += mse(z, reference)?;
    }
    align /= f as f64;
    let mut pair = 0.0;
    if f > 1 {
        for i in 0..f {
            for j in i + 1..f {
                pair += mse(&estimates[i], &estimates[j])?;
            }
        }
        pair *= pair_coefficient(f);
    }
    Ok((align, pair))
}

/// `2 / (F (F - 1))`, zero for a single frame.
pub fn pair_coefficient(frames: usize) -> f64 {
    if frames < 2 {
        0.0
    } else {
        2.0 / (frames * (frames - 1)) as f64
    }
}

#[allow(clippy::too_many_arguments)]
pub fn loss_frame(
    x: &ImageTensor,
    delta: &PerturbationField,
    enc: &dyn LatentEncoder,
    pred: &dyn NoisePredictor,
    cond: &dyn PoseConditioner,
    sched: &DiffusionSchedule,
    frames: usize,
    t: usize,
    noise_frames: &[LatentTensor],
) -> Result<f64> {
    check_frames(frames, noise_frames)?;
    let xp = x.perturbed(delta)?;
    let estimates = estimate_frames(&xp, enc, pred, cond, sched, t, noise_frames)?;
    let (align, pair) = frame_terms(&estimates, &enc.encode(x)?)?;
    Ok(align + pair)
}

fn check_frames(frames: usize, noise_frames: &[LatentTensor]) -> Result<()> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be at least 1"));
    }
    if noise_frames.len() != frames {
        return Err(Error::shape(format!(
            "{} noise latents supplied for {frames} frames",
            noise_frames.len()
        )));
    }
    Ok(())
}

/// `max(d(x + delta, x) - zeta, 0)`
pub fn loss_lpips_penalty(
    x: &ImageTensor,
    delta: &PerturbationField,
    pd: &dyn PerceptualDistance,
    zeta: f64,
) -> Result<f64> {
    if !(zeta >= 0.0) {
        return Err(Error::invalid(format!("perceptual budget must be non-negative, got {zeta}")));
    }
    Ok(hinge(pd.distance(&x.perturbed(delta)?, x)?, zeta))
}

pub fn hinge(distance: f64, zeta: f64) -> f64 {
    (distance - zeta).max(0.0)
}

/// The full weighted objective at `x + delta`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    x: &ImageTensor,
    delta: &PerturbationField,
    bundle: &ExtractorBundle,
    w: &LossWeights,
    sched: &DiffusionSchedule,
    frames: usize,
    t: usize,
    noise_frames: &[LatentTensor],
) -> Result<LossBreakdown> {
    let clean = CleanFeatures::compute(x, bundle)?;
    let xp = x.perturbed(delta)?;
    let objective = Objective { bundle, weights: w, schedule: sched, frames };
    Ok(objective.evaluate(&clean, &xp, &xp, t, noise_frames, false)?.breakdown)
}

/// Extractor outputs on the clean image; fixed for a whole optimization run.
#[derive(Debug, Clone)]
pub struct CleanFeatures {
    pub image: ImageTensor,
    pub latent: LatentTensor,
    pub embedding: Vec<f64>,
    pub reference_maps: Vec<Vec<Tensor3>>,
}

impl CleanFeatures {
    pub fn compute(x: &ImageTensor, bundle: &ExtractorBundle) -> Result<Self> {
        let latent = bundle.encoder.encode(x)?;
        let embedding = bundle.semantic.embed(x)?;
        let reference_maps = bundle
            .references
            .iter()
            .map(|r| r.extract(&latent))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { image: x.clone(), latent, embedding, reference_maps })
    }
}

/// Objective value and, when requested, gradients with respect to the
/// attacked view and the released image.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    /// Gradient with respect to the image fed to the extractors.
    pub grad_view: Option<Tensor3>,
    /// Gradient with respect to the untransformed `x + delta` (hinge term only).
    pub grad_released: Option<Tensor3>,
}

/// Binds the bundle, weights, schedule, and frame count.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub bundle: &'a ExtractorBundle,
    pub weights: &'a LossWeights,
    pub schedule: &'a DiffusionSchedule,
    pub frames: usize,
}

impl Objective<'_> {
    /// `view` is what the extractors see (the transformed `x + delta` under
    /// EoT); `released` is the untransformed `x + delta`, which the
    /// perceptual hinge constrains.
    pub fn evaluate(
        &self,
        clean: &CleanFeatures,
        view: &ImageTensor,
        released: &ImageTensor,
        t: usize,
        noise_frames: &[LatentTensor],
        with_grad: bool,
    ) -> Result<Evaluation> {
        check_frames(self.frames, noise_frames)?;
        let b = self.bundle;
        let w = self.weights;

        let z_view = b.encoder.encode(view)?;
        let vae = mse(&z_view, &clean.latent)?;

        let e_view = b.semantic.embed(view)?;
        let clip = vec_mse(&e_view, &clean.embedding)?;

        let mut view_maps = Vec::with_capacity(b.references.len());
        let mut reference = 0.0;
        for (r, clean_maps) in b.references.iter().zip(&clean.reference_maps) {
            let maps = r.extract(&z_view)?;
            reference += maps_mse(&maps, clean_maps)?;
            view_maps.push(maps);
        }

        let poses = b.pose.condition_from(view, self.frames)?;
        let cond = Conditioning { reference: z_view.clone(), poses };
        for z in noise_frames {
            z_view.ensure_same_shape(z, "noise latent vs encoder latent")?;
        }
        let eps = b.noise_predictor.predict(noise_frames, &cond, t)?;
        let abar = self.schedule.alpha_bar(t)?;
        let estimates = noise_frames
            .iter()
            .zip(&eps)
            .map(|(z, e)| estimate_z0_with_alpha_bar(z, e, abar))
            .collect::<Result<Vec<_>>>()?;
        let (align, pair) = frame_terms(&estimates, &clean.latent)?;
        let frame = align + pair;

        let distance = b.perceptual.distance(released, &clean.image)?;
        let lpips_penalty = hinge(distance, w.zeta);

        let breakdown = LossBreakdown::compose(vae, clip, reference, frame, lpips_penalty, w);
        if !with_grad {
            return Ok(Evaluation { breakdown, grad_view: None, grad_released: None });
        }

        let mut grad_latent = Tensor3::zeros(z_view.shape());
        let mut grad_view = Tensor3::zeros(view.shape());

        if w.lambda_vae != 0.0 {
            grad_latent.axpy(w.lambda_vae, &mse_grad(&z_view, &clean.latent)?)?;
        }
        if w.lambda_clip != 0.0 {
            let n = e_view.len().max(1) as f64;
            let g: Vec<f64> = e_view
                .iter()
                .zip(&clean.embedding)
                .map(|(a, c)| w.lambda_clip * 2.0 * (a - c) / n)
                .collect();
            grad_view.axpy(1.0, &b.semantic.embed_vjp(view, &g)?)?;
        }
        if w.lambda_ref != 0.0 {
            for ((r, maps), clean_maps) in b.references.iter().zip(&view_maps).zip(&clean.reference_maps) {
                let g = maps_mse_grad(maps, clean_maps, w.lambda_ref)?;
                grad_latent.axpy(1.0, &r.extract_vjp(&z_view, &g)?)?;
            }
        }
        if w.lambda_frame != 0.0 {
            let f = self.frames;
            let coef = pair_coefficient(f);
            let eps_scale = -(1.0 - abar).sqrt() / abar.sqrt();
            let mut grad_eps = Vec::with_capacity(f);
            for i in 0..f {
                let mut g = mse_grad(&estimates[i], &clean.latent)?.scale(1.0 / f as f64);
                for j in 0..f {
                    if j != i {
                        g.axpy(coef, &mse_grad(&estimates[i], &estimates[j])?)?;
                    }
                }
                grad_eps.push(g.scale(w.lambda_frame * eps_scale));
            }
            let cg = b.noise_predictor.predict_vjp(noise_frames, &cond, t, &grad_eps)?;
            grad_latent.axpy(1.0, &cg.reference)?;
            grad_view.axpy(1.0, &b.pose.condition_vjp(view, &cg.poses)?)?;
        }
        grad_view.axpy(1.0, &b.encoder.encode_vjp(view, &grad_latent)?)?;

        let grad_released = if w.lambda_lpips != 0.0 && lpips_penalty > 0.0 {
            b.perceptual.distance_grad(released, &clean.image)?.scale(-w.lambda_lpips)
        } else {
            Tensor3::zeros(released.shape())
        };

        Ok(Evaluation { breakdown, grad_view: Some(grad_view), grad_released: Some(grad_released) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, sample_latent_frames, ScheduleKind};
    use crate::extractors::toy::{
        IdentityEncoder, ToyLatentEncoder, ToyReferenceExtractor, ToyStackBuilder,
    };
    use crate::extractors::{build_toy_stack, ConditioningGrad};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, 8, 8), |_, _, _| rng.random_range(0.2..0.8))).unwrap()
    }

    fn field(seed: u64, eta: f64) -> PerturbationField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PerturbationField::from_tensor(Tensor3::from_fn(Shape::new(3, 8, 8), |_, _, _| rng.random_range(-eta..eta)))
    }

    fn schedule() -> DiffusionSchedule {
        make_schedule(ScheduleKind::ScaledLinear, 1000, 25).unwrap()
    }

    #[test]
    fn default_weights_match_published_values() {
        let w = LossWeights::default();
        assert_eq!(
            (w.lambda_vae, w.lambda_clip, w.lambda_ref, w.lambda_frame, w.lambda_lpips, w.zeta),
            (10.0, 10.0, 100.0, 1.0, 10.0, 0.1)
        );
        assert!(w.validate().is_ok());
        assert!(LossWeights { lambda_ref: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn vae_zero_at_zero_delta() {
        let enc = ToyLatentEncoder::new(0, 4);
        let x = image(1);
        assert_eq!(loss_vae(&x, &PerturbationField::zeros(x.shape()), &enc).unwrap(), 0.0);
    }

    #[test]
    fn vae_identity_encoder_constant_field() {
        let x = image(1);
        let d = PerturbationField::from_tensor(Tensor3::filled(x.shape(), 0.1));
        let v = loss_vae(&x, &d, &IdentityEncoder).unwrap();
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn vae_matches_elementwise_oracle() {
        let enc = ToyLatentEncoder::new(3, 4);
        for s in 0..5 {
            let x = image(s);
            let d = field(s + 10, 0.1);
            let a = enc.encode(&x.perturbed(&d).unwrap()).unwrap();
            let b = enc.encode(&x).unwrap();
            let mut acc = 0.0;
            for i in 0..a.len() {
                acc += (a.data()[i] - b.data()[i]).powi(2);
            }
            let oracle = acc / a.len() as f64;
            assert!((loss_vae(&x, &d, &enc).unwrap() - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn feature_terms() {
        let bundle = build_toy_stack(0, 4).unwrap();
        let x = image(2);
        let refs: Vec<&dyn ReferenceFeatureExtractor> = bundle.references.iter().map(|r| r.as_ref()).collect();
        let zero = PerturbationField::zeros(x.shape());
        assert_eq!(
            loss_feature(&x, &zero, bundle.semantic.as_ref(), &refs, bundle.encoder.as_ref()).unwrap(),
            (0.0, 0.0)
        );
        assert!(loss_feature(&x, &zero, bundle.semantic.as_ref(), &[], bundle.encoder.as_ref()).is_err());

        // Ensemble additivity with identical extractors.
        let same = ToyReferenceExtractor::new(5, 0, 4);
        let d = field(3, 0.06);
        let single = loss_feature(&x, &d, bundle.semantic.as_ref(), &[&same], bundle.encoder.as_ref()).unwrap().1;
        let triple = loss_feature(&x, &d, bundle.semantic.as_ref(), &[&same, &same, &same], bundle.encoder.as_ref()).unwrap().1;
        assert!((triple - 3.0 * single).abs() < 1e-14);
        assert!(single > 0.0);

        // Explicit recomputation.
        let xp = x.perturbed(&d).unwrap();
        let (ea, eb) = (bundle.semantic.embed(&xp).unwrap(), bundle.semantic.embed(&x).unwrap());
        let clip_oracle = ea.iter().zip(&eb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / ea.len() as f64;
        let (za, zb) = (bundle.encoder.encode(&xp).unwrap(), bundle.encoder.encode(&x).unwrap());
        let mut ref_oracle = 0.0;
        for r in &bundle.references {
            let (ma, mb) = (r.extract(&za).unwrap(), r.extract(&zb).unwrap());
            let mut s = 0.0;
            let mut n = 0;
            for (a, b) in ma.iter().zip(&mb) {
                for (p, q) in a.data().iter().zip(b.data()) {
                    s += (p - q).powi(2);
                    n += 1;
                }
            }
            ref_oracle += s / n as f64;
        }
        let (clip, reference) = loss_feature(&x, &d, bundle.semantic.as_ref(), &refs, bundle.encoder.as_ref()).unwrap();
        assert!((clip - clip_oracle).abs() < 1e-14);
        assert!((reference - ref_oracle).abs() < 1e-14);
    }

    /// Predicts fixed per-frame noise regardless of input.
    struct StubPredictor(Vec<LatentTensor>);

    impl NoisePredictor for StubPredictor {
        fn name(&self) -> &str {
            "stub"
        }
        fn latent_channels(&self) -> usize {
            3
        }
        fn pose_channels(&self) -> usize {
            2
        }
        fn predict(&self, noisy: &[LatentTensor], _: &Conditioning, _: usize) -> Result<Vec<LatentTensor>> {
            Ok(self.0[..noisy.len()].to_vec())
        }
        fn predict_vjp(&self, _: &[LatentTensor], cond: &Conditioning, _: usize, _: &[LatentTensor]) -> Result<ConditioningGrad> {
            Ok(ConditioningGrad {
                reference: Tensor3::zeros(cond.reference.shape()),
                poses: cond.poses.iter().map(|p| Tensor3::zeros(p.shape())).collect(),
            })
        }
    }

    #[test]
    fn frame_loss_single_frame_has_no_pair_term() {
        let x = image(4);
        let shape = x.shape();
        let sched = DiffusionSchedule::from_betas(vec![0.75; 1].into_iter().chain(vec![0.5; 3]).collect(), 4).unwrap();
        let pose = crate::extractors::toy::ToyPoseConditioner::new(0, 1);
        let stub = StubPredictor(vec![Tensor3::filled(shape, 0.5)]);
        let zt = vec![Tensor3::filled(shape, 1.0)];
        let got = loss_frame(&x, &PerturbationField::zeros(shape), &IdentityEncoder, &stub, &pose, &sched, 1, 0, &zt).unwrap();
        // abar_0 = 0.25, z0 = (1 - sqrt(.75) * .5) / .5
        let z0 = (1.0 - 0.75_f64.sqrt() * 0.5) / 0.5;
        let oracle = x.data().iter().map(|v| (z0 - v).powi(2)).sum::<f64>() / x.data().len() as f64;
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn frame_loss_two_frames_hand_oracle() {
        let x = ImageTensor::filled(8, 8, 0.5).unwrap();
        let shape = x.shape();
        let sched = DiffusionSchedule::from_betas(vec![0.75, 0.5], 2).unwrap();
        let pose = crate::extractors::toy::ToyPoseConditioner::new(0, 1);
        // alpha_bar = 0.25, z0^f = (z_t - sqrt(.75) eps_f) / .5
        let stub = StubPredictor(vec![Tensor3::filled(shape, 0.0), Tensor3::filled(shape, 1.0)]);
        let zt = vec![Tensor3::filled(shape, 1.0), Tensor3::filled(shape, 1.0)];
        let got = loss_frame(&x, &PerturbationField::zeros(shape), &IdentityEncoder, &stub, &pose, &sched, 2, 0, &zt).unwrap();
        let z1 = 2.0;
        let z2 = (1.0 - 0.75_f64.sqrt()) / 0.5;
        let align = ((z1 - 0.5_f64).powi(2) + (z2 - 0.5_f64).powi(2)) / 2.0;
        let pair = 1.0 * (z1 - z2).powi(2);
        assert!((got - (align + pair)).abs() < 1e-12);
    }

    #[test]
    fn frame_loss_length_mismatch() {
        let bundle = build_toy_stack(0, 4).unwrap();
        let x = image(1);
        let noise = sample_latent_frames(3, Shape::new(4, 4, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = loss_frame(
            &x,
            &PerturbationField::zeros(x.shape()),
            bundle.encoder.as_ref(),
            bundle.noise_predictor.as_ref(),
            bundle.pose.as_ref(),
            &schedule(),
            5,
            0,
            &noise,
        );
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn default_pair_coefficient() {
        assert_eq!(pair_coefficient(5), 0.1);
        assert_eq!(pair_coefficient(1), 0.0);
        assert_eq!(pair_coefficient(2), 1.0);
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(hinge(0.05, 0.1), 0.0);
        assert!((hinge(0.15, 0.1) - 0.05).abs() < 1e-15);
        let pd = crate::extractors::toy::ToyPerceptualDistance::new(0);
        let x = image(3);
        for zeta in [0.0, 0.1, 1.0] {
            assert_eq!(loss_lpips_penalty(&x, &PerturbationField::zeros(x.shape()), &pd, zeta).unwrap(), 0.0);
        }
        assert!(loss_lpips_penalty(&x, &PerturbationField::zeros(x.shape()), &pd, -0.1).is_err());
    }

    #[test]
    fn total_zero_at_zero_delta() {
        let bundle = build_toy_stack(1, 4).unwrap();
        let x = image(5);
        let noise = sample_latent_frames(5, Shape::new(4, 4, 4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // The frame term is not zero at delta = 0 (noise frames differ from the
        // reference); the distance terms are.
        let b = loss_total(&x, &PerturbationField::zeros(x.shape()), &bundle, &LossWeights::default(), &schedule(), 5, 0, &noise).unwrap();
        assert_eq!((b.vae, b.clip, b.reference, b.lpips_penalty), (0.0, 0.0, 0.0, 0.0));
        let w = LossWeights { lambda_frame: 0.0, ..LossWeights::default() };
        let b = loss_total(&x, &PerturbationField::zeros(x.shape()), &bundle, &w, &schedule(), 5, 0, &noise).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn total_recomposes_independent_terms() {
        let bundle = ToyStackBuilder::new(9).build().unwrap();
        let sched = schedule();
        let w = LossWeights { zeta: 0.0, ..LossWeights::default() };
        for s in 0..5 {
            let x = image(s);
            let d = field(100 + s, 16.0 / 255.0);
            let noise = sample_latent_frames(5, Shape::new(4, 4, 4), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let refs: Vec<&dyn ReferenceFeatureExtractor> = bundle.references.iter().map(|r| r.as_ref()).collect();
            let vae = loss_vae(&x, &d, bundle.encoder.as_ref()).unwrap();
            let (clip, reference) = loss_feature(&x, &d, bundle.semantic.as_ref(), &refs, bundle.encoder.as_ref()).unwrap();
            let frame = loss_frame(&x, &d, bundle.encoder.as_ref(), bundle.noise_predictor.as_ref(), bundle.pose.as_ref(), &sched, 5, 40, &noise).unwrap();
            let pen = loss_lpips_penalty(&x, &d, bundle.perceptual.as_ref(), w.zeta).unwrap();
            let b = loss_total(&x, &d, &bundle, &w, &sched, 5, 40, &noise).unwrap();
            let oracle = 10.0 * vae + 10.0 * clip + 100.0 * reference + frame - 10.0 * pen;
            assert!((b.total - oracle).abs() < 1e-10 * oracle.abs().max(1.0));
            assert!(pen > 0.0);
        }
    }
    #[test]
    fn objective_gradient_matches_finite_differences() {
        let bundle = build_toy_stack(4, 4).unwrap();
        let sched = schedule();
        let w = LossWeights { zeta: 0.0, ..LossWeights::default() };
        let x = image(7);
        let clean = CleanFeatures::compute(&x, &bundle).unwrap();
        let noise = sample_latent_frames(3, Shape::new(4, 4, 4), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let obj = Objective { bundle: &bundle, weights: &w, schedule: &sched, frames: 3 };
        let d = field(8, 0.05);
        let xp = x.perturbed(&d).unwrap();
        let ev = obj.evaluate(&clean, &xp, &xp, 120, &noise, true).unwrap();
        let mut g = ev.grad_view.unwrap();
        g.axpy(1.0, &ev.grad_released.unwrap()).unwrap();
        let f = |t: &Tensor3| {
            let img = ImageTensor::from_tensor(t.clone()).unwrap();
            obj.evaluate(&clean, &img, &img, 120, &noise, false).unwrap().breakdown.total
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..6 {
            let dir = Tensor3::from_fn(xp.shape(), |_, _, _| rng.random_range(-1.0..1.0));
            let plus = xp.tensor().add(&dir.scale(h)).unwrap();
            let minus = xp.tensor().sub(&dir.scale(h)).unwrap();
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = g.dot(&dir).unwrap();
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-8), "fd {fd} analytic {an}");
        }
    }
}
