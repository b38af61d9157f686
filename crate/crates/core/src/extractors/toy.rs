//! Seeded toy surrogates: small strided convolutions and dense maps composed
//! with smooth activations. They are resolution-agnostic, deterministic, and
//! carry exact analytic vector-Jacobian products, which makes them suitable
//! for finite-difference oracles and fast end-to-end runs.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    Conditioning, ConditioningGrad, ExtractorBundle, InputRange, LatentEncoder, NoisePredictor,
    PerceptualDistance, PoseConditioner, ReferenceFeatureExtractor, SemanticEncoder,
};
use crate::error::{Error, Result};
use crate::resample::SeparableOp;
use crate::tensor::{ImageTensor, LatentTensor, Shape, Tensor3};

pub const TOY_LATENT_CHANNELS: usize = 4;
pub const TOY_EMBEDDING_DIM: usize = 16;
pub const TOY_SEMANTIC_RESOLUTION: usize = 224;
pub const TOY_POSE_CHANNELS: usize = 2;
pub const TOY_REFERENCE_COUNT: usize = 3;

const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

const TAG_ENCODER: u64 = 1;
const TAG_SEMANTIC: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_POSE: u64 = 4;
const TAG_PERCEPTUAL: u64 = 5;
const TAG_DECODER: u64 = 6;
const TAG_REFERENCE: u64 = 100;

fn component_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Convolution without padding; output side is `(side - kernel) / stride + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchConv {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl PatchConv {
    pub fn random(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        let weight = (0..out_ch * in_ch * kernel * kernel).map(|_| normal.sample(rng)).collect();
        let bias_dist = Normal::new(0.0, 0.1).expect("finite std");
        let bias = (0..out_ch).map(|_| bias_dist.sample(rng)).collect();
        Self { in_ch, out_ch, kernel, stride, weight, bias }
    }

    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_ch + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_ch {
            return Err(Error::shape(format!(
                "convolution expects {} channels, got {input}",
                self.in_ch
            )));
        }
        if input.height < self.kernel || input.width < self.kernel {
            return Err(Error::shape(format!(
                "input {input} smaller than {k}x{k} kernel",
                k = self.kernel
            )));
        }
        Ok(Shape::new(
            self.out_ch,
            (input.height - self.kernel) / self.stride + 1,
            (input.width - self.kernel) / self.stride + 1,
        ))
    }

    /// Pre-activation output.
    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        let os = self.output_shape(x.shape())?;
        let mut out = Tensor3::zeros(os);
        for o in 0..self.out_ch {
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                acc += self.w(o, i, ky, kx)
                                    * x.at(i, oy * self.stride + ky, ox * self.stride + kx);
                            }
                        }
                    }
                    let idx = out.index(o, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the input, given the gradient at the
    /// pre-activation output.
    pub fn backward(&self, input: Shape, grad: &Tensor3) -> Result<Tensor3> {
        let os = self.output_shape(input)?;
        if grad.shape() != os {
            return Err(Error::shape(format!("conv gradient {} vs output {os}", grad.shape())));
        }
        let mut gx = Tensor3::zeros(input);
        for o in 0..self.out_ch {
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let g = grad.at(o, oy, ox);
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..self.in_ch {
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let idx = gx.index(i, oy * self.stride + ky, ox * self.stride + kx);
                                gx.data_mut()[idx] += self.w(o, i, ky, kx) * g;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn random(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, gain / (inputs as f64).sqrt()).expect("finite std");
        let weight = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        let bias_dist = Normal::new(0.0, 0.1).expect("finite std");
        let bias = (0..outputs).map(|_| bias_dist.sample(rng)).collect();
        Self { inputs, outputs, weight, bias }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::shape(format!("dense layer expects {} inputs, got {}", self.inputs, x.len())));
        }
        Ok((0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }

    pub fn backward(&self, grad: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.inputs];
        for (o, g) in grad.iter().enumerate() {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (gi, w) in gx.iter_mut().zip(row) {
                *gi += w * g;
            }
        }
        gx
    }
}

fn tanh(t: Tensor3) -> Tensor3 {
    t.map(f64::tanh)
}

/// `g * (1 - y^2)` for `y = tanh(.)`
fn tanh_back(y: &Tensor3, g: &Tensor3) -> Result<Tensor3> {
    y.zip_map(g, |y, g| g * (1.0 - y * y))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn symmetric(img: &ImageTensor) -> Tensor3 {
    img.tensor().map(|v| 2.0 * v - 1.0)
}

// ---------------------------------------------------------------------------

/// `tanh(conv_2x2/2(2x - 1))`, halving each spatial side.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLatentEncoder {
    conv: PatchConv,
}

impl ToyLatentEncoder {
    pub fn new(seed: u64, latent_channels: usize) -> Self {
        let mut rng = component_rng(seed, TAG_ENCODER);
        Self { conv: PatchConv::random(3, latent_channels, 2, 2, 1.5, &mut rng) }
    }
}

impl LatentEncoder for ToyLatentEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_channels(&self) -> usize {
        self.conv.out_ch
    }

    fn latent_shape(&self, image: Shape) -> Result<Shape> {
        self.conv.output_shape(image)
    }

    fn input_range(&self) -> InputRange {
        InputRange::Symmetric
    }

    fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        Ok(tanh(self.conv.forward(&symmetric(image))?))
    }

    fn encode_vjp(&self, image: &ImageTensor, grad: &LatentTensor) -> Result<Tensor3> {
        let z = self.encode(image)?;
        let pre = tanh_back(&z, grad)?;
        Ok(self.conv.backward(image.shape(), &pre)?.scale(2.0))
    }
}

/// `z = x`. Latent shape equals image shape.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityEncoder;

impl LatentEncoder for IdentityEncoder {
    fn name(&self) -> &str {
        "identity"
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn latent_shape(&self, image: Shape) -> Result<Shape> {
        Ok(image)
    }

    fn input_range(&self) -> InputRange {
        InputRange::UnitInterval
    }

    fn encode(&self, image: &ImageTensor) -> Result<LatentTensor> {
        Ok(image.tensor().clone())
    }

    fn encode_vjp(&self, image: &ImageTensor, grad: &LatentTensor) -> Result<Tensor3> {
        image.tensor().ensure_same_shape(grad, "identity encoder gradient")?;
        Ok(grad.clone())
    }
}

/// Standardize, bilinear resize to the working resolution, average-pool to a
/// `grid x grid` layout, then `tanh(dense(.))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySemanticEncoder {
    resolution: usize,
    grid: usize,
    dense: Dense,
}

impl ToySemanticEncoder {
    pub fn new(seed: u64, resolution: usize) -> Self {
        let grid = 4;
        let mut rng = component_rng(seed, TAG_SEMANTIC);
        Self { resolution, grid, dense: Dense::random(3 * grid * grid, TOY_EMBEDDING_DIM, 2.0, &mut rng) }
    }

    fn cell_bounds(&self, cell: usize) -> (usize, usize) {
        (cell * self.resolution / self.grid, (cell + 1) * self.resolution / self.grid)
    }

    fn standardize(image: &ImageTensor) -> Tensor3 {
        let t = image.tensor();
        Tensor3::from_fn(t.shape(), |c, y, x| (t.at(c, y, x) - CLIP_MEAN[c]) / CLIP_STD[c])
    }

    fn resize_op(&self, image: &ImageTensor) -> Result<SeparableOp> {
        SeparableOp::bilinear(image.height(), image.width(), self.resolution, self.resolution)
    }

    fn pool(&self, r: &Tensor3) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.grid * self.grid);
        for c in 0..3 {
            for gy in 0..self.grid {
                let (y0, y1) = self.cell_bounds(gy);
                for gx in 0..self.grid {
                    let (x0, x1) = self.cell_bounds(gx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += r.at(c, y, x);
                        }
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }

    fn pool_back(&self, grad: &[f64]) -> Tensor3 {
        let mut r = Tensor3::zeros(Shape::new(3, self.resolution, self.resolution));
        let mut k = 0;
        for c in 0..3 {
            for gy in 0..self.grid {
                let (y0, y1) = self.cell_bounds(gy);
                for gx in 0..self.grid {
                    let (x0, x1) = self.cell_bounds(gx);
                    let g = grad[k] / ((y1 - y0) * (x1 - x0)) as f64;
                    k += 1;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let idx = r.index(c, y, x);
                            r.data_mut()[idx] = g;
                        }
                    }
                }
            }
        }
        r
    }
}

impl SemanticEncoder for ToySemanticEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn embedding_dim(&self) -> usize {
        self.dense.outputs
    }

    fn working_resolution(&self) -> (usize, usize) {
        (self.resolution, self.resolution)
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        let r = self.resize_op(image)?.apply(&Self::standardize(image))?;
        Ok(self.dense.forward(&self.pool(&r))?.into_iter().map(f64::tanh).collect())
    }

    fn embed_vjp(&self, image: &ImageTensor, grad: &[f64]) -> Result<Tensor3> {
        if grad.len() != self.embedding_dim() {
            return Err(Error::shape(format!(
                "embedding gradient has {} entries, expected {}",
                grad.len(),
                self.embedding_dim()
            )));
        }
        let e = self.embed(image)?;
        let pre: Vec<f64> = e.iter().zip(grad).map(|(y, g)| g * (1.0 - y * y)).collect();
        let g_pool = self.dense.backward(&pre);
        let g_std = self.resize_op(image)?.transpose(&self.pool_back(&g_pool))?;
        Ok(Tensor3::from_fn(g_std.shape(), |c, y, x| g_std.at(c, y, x) / CLIP_STD[c]))
    }
}

/// Two feature maps: `m1 = tanh(conv1x1(z))`, `m2 = tanh(conv2x2/2(m1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyReferenceExtractor {
    name: String,
    conv1: PatchConv,
    conv2: PatchConv,
}

impl ToyReferenceExtractor {
    pub fn new(seed: u64, index: u64, latent_channels: usize) -> Self {
        let mut rng = component_rng(seed, TAG_REFERENCE + index);
        let conv1 = PatchConv::random(latent_channels, 8, 1, 1, 1.5, &mut rng);
        let conv2 = PatchConv::random(8, 8, 2, 2, 1.5, &mut rng);
        Self { name: format!("toy#{index}"), conv1, conv2 }
    }

    fn maps(&self, latent: &LatentTensor) -> Result<(Tensor3, Tensor3)> {
        let m1 = tanh(self.conv1.forward(latent)?);
        let m2 = tanh(self.conv2.forward(&m1)?);
        Ok((m1, m2))
    }
}

impl ReferenceFeatureExtractor for ToyReferenceExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_channels(&self) -> usize {
        self.conv1.in_ch
    }

    fn extract(&self, latent: &LatentTensor) -> Result<Vec<Tensor3>> {
        let (m1, m2) = self.maps(latent)?;
        Ok(vec![m1, m2])
    }

    fn extract_vjp(&self, latent: &LatentTensor, grads: &[Tensor3]) -> Result<LatentTensor> {
        let [g1, g2] = grads else {
            return Err(Error::shape(format!("expected 2 feature-map gradients, got {}", grads.len())));
        };
        let (m1, m2) = self.maps(latent)?;
        let pre2 = tanh_back(&m2, g2)?;
        let mut gm1 = self.conv2.backward(m1.shape(), &pre2)?;
        gm1.axpy(1.0, g1)?;
        let pre1 = tanh_back(&m1, &gm1)?;
        self.conv1.backward(latent.shape(), &pre1)
    }
}

/// `sigmoid(conv_fxf/f(2x - 1))`: soft keypoint maps on the latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPoseConditioner {
    conv: PatchConv,
}

impl ToyPoseConditioner {
    /// `factor` must match the encoder's spatial downsampling.
    pub fn new(seed: u64, factor: usize) -> Self {
        let mut rng = component_rng(seed, TAG_POSE);
        Self { conv: PatchConv::random(3, TOY_POSE_CHANNELS, factor, factor, 1.5, &mut rng) }
    }

    fn pose(&self, image: &ImageTensor) -> Result<Tensor3> {
        Ok(self.conv.forward(&symmetric(image))?.map(sigmoid))
    }
}

impl PoseConditioner for ToyPoseConditioner {
    fn name(&self) -> &str {
        "toy"
    }

    fn pose_channels(&self) -> usize {
        self.conv.out_ch
    }

    fn condition_from(&self, image: &ImageTensor, repeats: usize) -> Result<Vec<Tensor3>> {
        if repeats == 0 {
            return Err(Error::invalid("pose repeats must be at least 1"));
        }
        let p = self.pose(image)?;
        Ok(vec![p; repeats])
    }

    fn condition_vjp(&self, image: &ImageTensor, grads: &[Tensor3]) -> Result<Tensor3> {
        let p = self.pose(image)?;
        let mut total = Tensor3::zeros(p.shape());
        for g in grads {
            total.axpy(1.0, g)?;
        }
        let pre = p.zip_map(&total, |y, g| g * y * (1.0 - y))?;
        Ok(self.conv.backward(image.shape(), &pre)?.scale(2.0))
    }
}

/// `eps_f = tanh(conv1x1([z_t^f ; reference ; pose_f]) + temb(t))`
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNoisePredictor {
    latent_channels: usize,
    pose_channels: usize,
    conv: PatchConv,
    phase: Vec<f64>,
}

impl ToyNoisePredictor {
    pub fn new(seed: u64, latent_channels: usize, pose_channels: usize) -> Self {
        let mut rng = component_rng(seed, TAG_NOISE);
        let conv = PatchConv::random(2 * latent_channels + pose_channels, latent_channels, 1, 1, 1.5, &mut rng);
        let phase = (0..latent_channels).map(|c| 0.7 * c as f64).collect();
        Self { latent_channels, pose_channels, conv, phase }
    }

    fn time_bias(&self, c: usize, t: usize) -> f64 {
        0.5 * (0.01 * (c + 1) as f64 * t as f64 + self.phase[c]).sin()
    }

    fn check(&self, noisy: &[LatentTensor], cond: &Conditioning) -> Result<()> {
        if noisy.len() != cond.poses.len() {
            return Err(Error::shape(format!(
                "{} noisy latents but {} pose maps",
                noisy.len(),
                cond.poses.len()
            )));
        }
        Ok(())
    }

    fn frame(&self, z: &LatentTensor, cond: &Conditioning, pose: &Tensor3, t: usize) -> Result<Tensor3> {
        let input = Tensor3::concat_channels(&[z, &cond.reference, pose])?;
        let mut pre = self.conv.forward(&input)?;
        let plane = pre.height() * pre.width();
        for c in 0..self.latent_channels {
            let b = self.time_bias(c, t);
            pre.data_mut()[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        Ok(tanh(pre))
    }
}

impl NoisePredictor for ToyNoisePredictor {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    fn pose_channels(&self) -> usize {
        self.pose_channels
    }

    fn predict(&self, noisy: &[LatentTensor], cond: &Conditioning, t: usize) -> Result<Vec<LatentTensor>> {
        self.check(noisy, cond)?;
        noisy.iter().zip(&cond.poses).map(|(z, p)| self.frame(z, cond, p, t)).collect()
    }

    fn predict_vjp(
        &self,
        noisy: &[LatentTensor],
        cond: &Conditioning,
        t: usize,
        grad: &[LatentTensor],
    ) -> Result<ConditioningGrad> {
        self.check(noisy, cond)?;
        if grad.len() != noisy.len() {
            return Err(Error::shape("one gradient per predicted frame is required"));
        }
        let mut reference = Tensor3::zeros(cond.reference.shape());
        let mut poses = Vec::with_capacity(noisy.len());
        for ((z, pose), g) in noisy.iter().zip(&cond.poses).zip(grad) {
            let eps = self.frame(z, cond, pose, t)?;
            let pre = tanh_back(&eps, g)?;
            let input_shape = Shape::new(
                2 * self.latent_channels + self.pose_channels,
                z.height(),
                z.width(),
            );
            let g_in = self.conv.backward(input_shape, &pre)?;
            let parts = g_in.split_channels(&[self.latent_channels, self.latent_channels, self.pose_channels])?;
            reference.axpy(1.0, &parts[1])?;
            poses.push(parts[2].clone());
        }
        Ok(ConditioningGrad { reference, poses })
    }
}

/// Two-scale feature distance in the LPIPS mould: per-layer channel-weighted
/// squared feature differences, spatially averaged and summed over layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPerceptualDistance {
    conv1: PatchConv,
    conv2: PatchConv,
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl ToyPerceptualDistance {
    pub fn new(seed: u64) -> Self {
        let mut rng = component_rng(seed, TAG_PERCEPTUAL);
        let conv1 = PatchConv::random(3, 8, 1, 1, 2.0, &mut rng);
        let conv2 = PatchConv::random(8, 8, 2, 2, 1.5, &mut rng);
        let w1 = (0..8).map(|c| 0.5 + 0.1 * c as f64).collect();
        let w2 = (0..8).map(|c| 1.0 - 0.05 * c as f64).collect();
        Self { conv1, conv2, w1, w2 }
    }

    fn features(&self, img: &ImageTensor) -> Result<(Tensor3, Tensor3)> {
        let f1 = tanh(self.conv1.forward(&symmetric(img))?);
        let f2 = tanh(self.conv2.forward(&f1)?);
        Ok((f1, f2))
    }

    fn layer_distance(fa: &Tensor3, fb: &Tensor3, w: &[f64]) -> f64 {
        let plane = (fa.height() * fa.width()) as f64;
        let mut acc = 0.0;
        for c in 0..fa.channels() {
            let s: f64 = fa.plane(c).iter().zip(fb.plane(c)).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += w[c] * s;
        }
        acc / plane
    }

    fn layer_grad(fa: &Tensor3, fb: &Tensor3, w: &[f64]) -> Tensor3 {
        let plane = (fa.height() * fa.width()) as f64;
        Tensor3::from_fn(fa.shape(), |c, y, x| 2.0 * w[c] * (fa.at(c, y, x) - fb.at(c, y, x)) / plane)
    }
}

impl PerceptualDistance for ToyPerceptualDistance {
    fn name(&self) -> &str {
        "toy"
    }

    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        a.tensor().ensure_same_shape(b.tensor(), "perceptual distance operands")?;
        let (a1, a2) = self.features(a)?;
        let (b1, b2) = self.features(b)?;
        Ok(Self::layer_distance(&a1, &b1, &self.w1) + Self::layer_distance(&a2, &b2, &self.w2))
    }

    fn distance_grad(&self, a: &ImageTensor, b: &ImageTensor) -> Result<Tensor3> {
        a.tensor().ensure_same_shape(b.tensor(), "perceptual distance operands")?;
        let (a1, a2) = self.features(a)?;
        let (b1, b2) = self.features(b)?;
        let g2 = Self::layer_grad(&a2, &b2, &self.w2);
        let pre2 = tanh_back(&a2, &g2)?;
        let mut g1 = self.conv2.backward(a1.shape(), &pre2)?;
        g1.axpy(1.0, &Self::layer_grad(&a1, &b1, &self.w1))?;
        let pre1 = tanh_back(&a1, &g1)?;
        Ok(self.conv1.backward(a.shape(), &pre1)?.scale(2.0))
    }
}

/// Latent-to-image map used by the toy animation pipeline: a 1x1 convolution
/// to `3 * 4` channels, a 2x pixel shuffle, then a sigmoid. Forward only.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDecoder {
    conv: PatchConv,
}

impl ToyDecoder {
    pub fn new(seed: u64, latent_channels: usize) -> Self {
        let mut rng = component_rng(seed, TAG_DECODER);
        Self { conv: PatchConv::random(latent_channels, 12, 1, 1, 1.5, &mut rng) }
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageTensor> {
        let pre = self.conv.forward(latent)?;
        let (h, w) = (latent.height(), latent.width());
        let out = Tensor3::from_fn(Shape::new(3, 2 * h, 2 * w), |c, y, x| {
            sigmoid(pre.at(c * 4 + (y % 2) * 2 + x % 2, y / 2, x / 2))
        });
        ImageTensor::from_tensor(out)
    }
}

/// Builder for toy bundles.
#[derive(Debug, Clone)]
pub struct ToyStackBuilder {
    seed: u64,
    latent_channels: usize,
    references: usize,
    identity_encoder: bool,
    semantic_resolution: usize,
}

impl ToyStackBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            latent_channels: TOY_LATENT_CHANNELS,
            references: TOY_REFERENCE_COUNT,
            identity_encoder: false,
            semantic_resolution: TOY_SEMANTIC_RESOLUTION,
        }
    }

    pub fn latent_channels(mut self, channels: usize) -> Self {
        self.latent_channels = channels;
        self
    }

    pub fn references(mut self, k: usize) -> Self {
        self.references = k;
        self
    }

    /// Use `z = x` as the latent encoder; latents then have 3 channels at
    /// full resolution and the rest of the stack follows suit.
    pub fn identity_encoder(mut self, yes: bool) -> Self {
        self.identity_encoder = yes;
        self
    }

    pub fn semantic_resolution(mut self, side: usize) -> Self {
        self.semantic_resolution = side;
        self
    }

    pub fn build(self) -> Result<ExtractorBundle> {
        if self.latent_channels == 0 {
            return Err(Error::invalid("latent_channels must be at least 1"));
        }
        if self.semantic_resolution == 0 {
            return Err(Error::invalid("semantic resolution must be positive"));
        }
        let (encoder, channels, factor): (Arc<dyn LatentEncoder>, usize, usize) = if self.identity_encoder {
            (Arc::new(IdentityEncoder), 3, 1)
        } else {
            (Arc::new(ToyLatentEncoder::new(self.seed, self.latent_channels)), self.latent_channels, 2)
        };
        let references = (0..self.references as u64)
            .map(|k| Arc::new(ToyReferenceExtractor::new(self.seed, k, channels)) as Arc<dyn ReferenceFeatureExtractor>)
            .collect();
        ExtractorBundle::new(
            encoder,
            Arc::new(ToySemanticEncoder::new(self.seed, self.semantic_resolution)),
            references,
            Arc::new(ToyNoisePredictor::new(self.seed, channels, TOY_POSE_CHANNELS)),
            Arc::new(ToyPoseConditioner::new(self.seed, factor)),
            Arc::new(ToyPerceptualDistance::new(self.seed)),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, h, w), |_, _, _| rng.random_range(0.1..0.9))).unwrap()
    }

    fn random_tensor(seed: u64, shape: Shape) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at `x` along every coordinate.
    fn fd_grad(x: &Tensor3, step: f64, f: impl Fn(&Tensor3) -> f64) -> Tensor3 {
        let mut g = Tensor3::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        g
    }

    fn max_abs_diff(a: &Tensor3, b: &Tensor3) -> f64 {
        a.data().iter().zip(b.data()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    fn rel_err(a: &Tensor3, b: &Tensor3) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.data().iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(ToyLatentEncoder::new(0, 4), ToyLatentEncoder::new(0, 4));
        assert_eq!(ToySemanticEncoder::new(0, 224), ToySemanticEncoder::new(0, 224));
        assert_eq!(ToyReferenceExtractor::new(0, 2, 4), ToyReferenceExtractor::new(0, 2, 4));
        assert_ne!(ToyReferenceExtractor::new(0, 1, 4), ToyReferenceExtractor::new(0, 2, 4));
        assert_eq!(ToyNoisePredictor::new(0, 4, 2), ToyNoisePredictor::new(0, 4, 2));
        assert_eq!(ToyPerceptualDistance::new(0), ToyPerceptualDistance::new(0));
        assert_ne!(ToyLatentEncoder::new(0, 4), ToyLatentEncoder::new(1, 4));

        let a = build_stack_outputs(0);
        let b = build_stack_outputs(0);
        assert_eq!(a, b);
    }

    fn build_stack_outputs(seed: u64) -> (Tensor3, Vec<f64>, f64) {
        let bundle = ToyStackBuilder::new(seed).build().unwrap();
        let x = random_image(3, 8, 8);
        let y = random_image(4, 8, 8);
        (
            bundle.encoder.encode(&x).unwrap(),
            bundle.semantic.embed(&x).unwrap(),
            bundle.perceptual.distance(&x, &y).unwrap(),
        )
    }

    #[test]
    fn toy_dimensions() {
        let bundle = ToyStackBuilder::new(0).build().unwrap();
        let x = random_image(1, 8, 8);
        assert_eq!(bundle.encoder.encode(&x).unwrap().shape(), Shape::new(4, 4, 4));
        assert_eq!(bundle.semantic.embed(&x).unwrap().len(), 16);
        assert_eq!(bundle.semantic.working_resolution(), (224, 224));
        assert_eq!(bundle.reference_count(), 3);
        assert!(bundle.deterministic());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let enc = ToyLatentEncoder::new(0, 4);
        for probe in 0..3 {
            let x = random_image(probe, 8, 8);
            let weights = random_tensor(probe + 50, Shape::new(4, 4, 4));
            let scalar = |t: &Tensor3| {
                let img = ImageTensor::from_tensor(t.clone()).unwrap();
                enc.encode(&img).unwrap().dot(&weights).unwrap()
            };
            let fd = fd_grad(x.tensor(), 1e-4, scalar);
            let analytic = enc.encode_vjp(&x, &weights).unwrap();
            assert!(max_abs_diff(&analytic, &fd) < 1e-5, "deviation {}", max_abs_diff(&analytic, &fd));
        }
    }

    #[test]
    fn all_toy_gradients_match_finite_differences() {
        let seed = 7;
        for probe in 0..10u64 {
            let x = random_image(100 + probe, 8, 8);
            let other = random_image(200 + probe, 8, 8);

            let sem = ToySemanticEncoder::new(seed, 224);
            let w: Vec<f64> = (0..16).map(|i| ((i as f64) * 0.37 + probe as f64).sin()).collect();
            let fd = fd_grad(x.tensor(), 1e-4, |t| {
                let e = sem.embed(&ImageTensor::from_tensor(t.clone()).unwrap()).unwrap();
                e.iter().zip(&w).map(|(a, b)| a * b).sum()
            });
            assert!(rel_err(&sem.embed_vjp(&x, &w).unwrap(), &fd) < 1e-4);

            let pose = ToyPoseConditioner::new(seed, 2);
            let pw = random_tensor(probe, Shape::new(2, 4, 4));
            let fd = fd_grad(x.tensor(), 1e-4, |t| {
                let ps = pose.condition_from(&ImageTensor::from_tensor(t.clone()).unwrap(), 3).unwrap();
                ps.iter().map(|p| p.dot(&pw).unwrap()).sum()
            });
            let analytic = pose.condition_vjp(&x, &[pw.clone(), pw.clone(), pw.clone()]).unwrap();
            assert!(rel_err(&analytic, &fd) < 1e-4);

            let pd = ToyPerceptualDistance::new(seed);
            let fd = fd_grad(x.tensor(), 1e-4, |t| {
                pd.distance(&ImageTensor::from_tensor(t.clone()).unwrap(), &other).unwrap()
            });
            assert!(rel_err(&pd.distance_grad(&x, &other).unwrap(), &fd) < 1e-4);

            let latent = random_tensor(300 + probe, Shape::new(4, 4, 4));
            let r = ToyReferenceExtractor::new(seed, 0, 4);
            let gw = r.extract(&latent).unwrap().iter().enumerate()
                .map(|(i, m)| random_tensor(400 + i as u64 + probe, m.shape()))
                .collect::<Vec<_>>();
            let fd = fd_grad(&latent, 1e-4, |t| {
                r.extract(t).unwrap().iter().zip(&gw).map(|(m, g)| m.dot(g).unwrap()).sum()
            });
            assert!(rel_err(&r.extract_vjp(&latent, &gw).unwrap(), &fd) < 1e-4);

            let np = ToyNoisePredictor::new(seed, 4, 2);
            let noisy: Vec<Tensor3> = (0..3).map(|f| random_tensor(500 + f + probe, latent.shape())).collect();
            let poses: Vec<Tensor3> = (0..3).map(|f| random_tensor(600 + f + probe, Shape::new(2, 4, 4)).map(|v| v.abs())).collect();
            let ge: Vec<Tensor3> = (0..3).map(|f| random_tensor(700 + f + probe, latent.shape())).collect();
            let scalar = |cond: &Conditioning| -> f64 {
                np.predict(&noisy, cond, 41).unwrap().iter().zip(&ge).map(|(e, g)| e.dot(g).unwrap()).sum()
            };
            let cond = Conditioning { reference: latent.clone(), poses: poses.clone() };
            let analytic = np.predict_vjp(&noisy, &cond, 41, &ge).unwrap();
            let fd_ref = fd_grad(&latent, 1e-4, |t| scalar(&Conditioning { reference: t.clone(), poses: poses.clone() }));
            assert!(rel_err(&analytic.reference, &fd_ref) < 1e-4);
            let fd_pose = fd_grad(&poses[1], 1e-4, |t| {
                let mut ps = poses.clone();
                ps[1] = t.clone();
                scalar(&Conditioning { reference: latent.clone(), poses: ps })
            });
            assert!(rel_err(&analytic.poses[1], &fd_pose) < 1e-4);
        }
    }

    #[test]
    fn perceptual_distance_axioms() {
        let pd = ToyPerceptualDistance::new(0);
        let a = random_image(1, 8, 8);
        let b = random_image(2, 8, 8);
        assert_eq!(pd.distance(&a, &a).unwrap(), 0.0);
        assert_eq!(pd.distance(&a, &b).unwrap(), pd.distance(&b, &a).unwrap());
        assert!(pd.distance(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn resolution_agnostic() {
        let bundle = ToyStackBuilder::new(0).build().unwrap();
        let x = random_image(1, 24, 17);
        let z = bundle.encoder.encode(&x).unwrap();
        assert_eq!(z.shape(), Shape::new(4, 12, 8));
        let poses = bundle.pose.condition_from(&x, 2).unwrap();
        assert_eq!(poses[0].shape(), Shape::new(2, 12, 8));
        assert_eq!(bundle.semantic.embed(&x).unwrap().len(), 16);
    }

    #[test]
    fn decoder_produces_valid_image() {
        let dec = ToyDecoder::new(0, 4);
        let img = dec.decode(&random_tensor(1, Shape::new(4, 4, 4))).unwrap();
        assert_eq!(img.shape(), Shape::new(3, 8, 8));
        assert!(img.is_valid());
    }
}
