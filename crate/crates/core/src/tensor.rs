//! Value model shared by every module: channel-first real tensors, RGB images
//! in the canonical `[0, 1]` range, perturbation fields, and latents.
//!
//! Storage is always `f64` in CHW order. Quantization to 8 bits only happens
//! in [`crate::io`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum height and width of an [`ImageTensor`].
pub const MIN_IMAGE_SIDE: usize = 8;

/// `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dense channel-first tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: Shape,
    data: Vec<f64>,
}

/// Latents are unbounded real tensors whose shape is fixed by the producing
/// extractor.
pub type LatentTensor = Tensor3;

impl Tensor3 {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "{} elements supplied for shape {shape}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Contiguous `height * width` plane of channel `c`.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.height * self.shape.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.height * self.shape.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &Tensor3, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor3, f: impl Fn(f64, f64) -> f64) -> Result<Tensor3> {
        self.ensure_same_shape(other, "elementwise operands")?;
        Ok(Tensor3 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor3) -> Result<Tensor3> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor3 {
        self.map(|v| v * k)
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Tensor3) -> Result<()> {
        self.ensure_same_shape(other, "accumulation operands")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Tensor3) -> Result<f64> {
        self.ensure_same_shape(other, "dot operands")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along the channel axis. All parts must share height and width.
    pub fn concat_channels(parts: &[&Tensor3]) -> Result<Tensor3> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::shape(format!(
                    "channel concat needs equal spatial size, got {} and {}",
                    first.shape, p.shape
                )));
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor3 { shape: Shape::new(channels, h, w), data })
    }

    /// Splits along the channel axis into chunks of the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Tensor3>> {
        if counts.iter().sum::<usize>() != self.channels() {
            return Err(Error::shape(format!(
                "channel split {counts:?} does not cover {}",
                self.shape
            )));
        }
        let plane = self.height() * self.width();
        let mut offset = 0;
        Ok(counts
            .iter()
            .map(|&c| {
                let data = self.data[offset * plane..(offset + c) * plane].to_vec();
                offset += c;
                Tensor3 { shape: Shape::new(c, self.height(), self.width()), data }
            })
            .collect())
    }
}

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    a.ensure_same_shape(b, "mse operands")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Gradient of [`mse`] with respect to its first argument.
pub fn mse_grad(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
    let n = a.len().max(1) as f64;
    a.zip_map(b, |x, y| 2.0 * (x - y) / n)
}

/// An RGB image. Values are nominally in `[0, 1]`; intermediate images such as
/// an unclamped `x + delta` may leave that range until [`clamp_valid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor(Tensor3);

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor3::new(Shape::new(3, height, width), data)?)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_tensor(Tensor3::filled(Shape::new(3, height, width), value))
    }

    pub fn from_tensor(t: Tensor3) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::shape(format!("image needs 3 channels, got {}", t.shape())));
        }
        if t.height() < MIN_IMAGE_SIDE || t.width() < MIN_IMAGE_SIDE {
            return Err(Error::invalid(format!(
                "image {}x{} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum",
                t.height(),
                t.width()
            )));
        }
        Ok(Self(t))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor3 {
        &mut self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    /// `x + delta` without clamping.
    pub fn perturbed(&self, delta: &PerturbationField) -> Result<ImageTensor> {
        Ok(ImageTensor(self.0.add(delta.tensor())?))
    }

    pub fn is_valid(&self) -> bool {
        self.0.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Additive field paired with an image of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationField(Tensor3);

impl PerturbationField {
    pub fn zeros(shape: Shape) -> Self {
        Self(Tensor3::zeros(shape))
    }

    pub fn from_tensor(t: Tensor3) -> Self {
        Self(t)
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }
}

/// Ordered frames of a uniform shape.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence(Vec<ImageTensor>);

impl FrameSequence {
    pub fn new(frames: Vec<ImageTensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("frame sequence must hold at least one frame"))?;
        let shape = first.shape();
        if let Some(bad) = frames.iter().find(|f| f.shape() != shape) {
            return Err(Error::shape(format!(
                "frames must share a shape: {shape} vs {}",
                bad.shape()
            )));
        }
        Ok(Self(frames))
    }

    pub fn single(frame: ImageTensor) -> Self {
        Self(vec![frame])
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.0[0].shape()
    }
}

pub fn clamp_valid(img: &ImageTensor) -> ImageTensor {
    ImageTensor(img.0.map(|v| v.clamp(0.0, 1.0)))
}

/// Elementwise clip of `delta` into `[-eta, eta]`.
pub fn linf_project(delta: &PerturbationField, eta: f64) -> Result<PerturbationField> {
    if !(eta >= 0.0) {
        return Err(Error::invalid(format!("budget must be non-negative, got {eta}")));
    }
    Ok(PerturbationField(delta.0.map(|v| v.clamp(-eta, eta))))
}

pub fn linf_norm(delta: &PerturbationField) -> f64 {
    delta.0.max_abs()
}
