//! Expectation over transformation: one random transform per optimization
//! step, applied to `x + delta` before the objective is evaluated.
//!
//! Every transform has a vector-Jacobian product so the gradient reaches
//! `delta` through it. In-loop JPEG is a surrogate: the DCT quantize and
//! dequantize pipeline runs forward, while rounding passes gradients straight
//! through.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample::SeparableOp;
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    GaussianBlur,
    JpegCompress,
    GaussianNoise,
    RandomResize,
    Identity,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::GaussianBlur,
        TransformKind::JpegCompress,
        TransformKind::GaussianNoise,
        TransformKind::RandomResize,
        TransformKind::Identity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::GaussianBlur => "gaussian_blur",
            TransformKind::JpegCompress => "jpeg_compress",
            TransformKind::GaussianNoise => "gaussian_noise",
            TransformKind::RandomResize => "random_resize",
            TransformKind::Identity => "identity",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown transform kind `{s}`")))
    }
}

/// A fully parameterized transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformSpec {
    GaussianBlur { sigma: f64 },
    JpegCompress { quality: u8 },
    GaussianNoise { std: f64, seed: u64 },
    RandomResize { scale: f64 },
    Identity,
}

impl TransformSpec {
    pub fn kind(&self) -> TransformKind {
        match self {
            TransformSpec::GaussianBlur { .. } => TransformKind::GaussianBlur,
            TransformSpec::JpegCompress { .. } => TransformKind::JpegCompress,
            TransformSpec::GaussianNoise { .. } => TransformKind::GaussianNoise,
            TransformSpec::RandomResize { .. } => TransformKind::RandomResize,
            TransformSpec::Identity => TransformKind::Identity,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TransformSpec::GaussianBlur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")))
            }
            TransformSpec::JpegCompress { quality } if !(1..=100).contains(&quality) => {
                Err(Error::invalid(format!("JPEG quality must lie in 1..=100, got {quality}")))
            }
            TransformSpec::GaussianNoise { std, .. } if !(std >= 0.0 && std.is_finite()) => {
                Err(Error::invalid(format!("noise std must be non-negative, got {std}")))
            }
            TransformSpec::RandomResize { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::invalid(format!("resize scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

/// Sampling ranges, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EotConfig {
    /// When false every step uses the identity and no randomness is consumed.
    pub enabled: bool,
    pub kinds: Vec<TransformKind>,
    pub blur_sigma: [f64; 2],
    pub jpeg_quality: [u8; 2],
    pub noise_std: [f64; 2],
    pub resize_scale: [f64; 2],
}

impl Default for EotConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kinds: TransformKind::ALL.to_vec(),
            blur_sigma: [0.5, 2.0],
            jpeg_quality: [50, 95],
            noise_std: [0.01, 0.05],
            resize_scale: [0.5, 1.5],
        }
    }
}

impl EotConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    /// Only the given kinds, default ranges.
    pub fn only(kinds: &[TransformKind]) -> Self {
        Self { kinds: kinds.to_vec(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.kinds.is_empty() {
            return Err(Error::invalid("eot.kinds must not be empty when EoT is enabled"));
        }
        let ordered = |name: &str, lo: f64, hi: f64, min_exclusive: bool| {
            let bad_lo = if min_exclusive { !(lo > 0.0) } else { !(lo >= 0.0) };
            if bad_lo || !(hi >= lo) || !hi.is_finite() {
                Err(Error::invalid(format!("eot.{name} range [{lo}, {hi}] is invalid")))
            } else {
                Ok(())
            }
        };
        ordered("blur_sigma", self.blur_sigma[0], self.blur_sigma[1], true)?;
        ordered("noise_std", self.noise_std[0], self.noise_std[1], false)?;
        ordered("resize_scale", self.resize_scale[0], self.resize_scale[1], true)?;
        let [qlo, qhi] = self.jpeg_quality;
        if qlo == 0 || qhi > 100 || qhi < qlo {
            return Err(Error::invalid(format!("eot.jpeg_quality range [{qlo}, {qhi}] is invalid")));
        }
        Ok(())
    }
}

/// Draws one transform: a uniform kind, then kind-specific parameters.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, cfg: &EotConfig) -> TransformSpec {
    if !cfg.enabled || cfg.kinds.is_empty() {
        return TransformSpec::Identity;
    }
    match cfg.kinds[rng.random_range(0..cfg.kinds.len())] {
        TransformKind::GaussianBlur => TransformSpec::GaussianBlur {
            sigma: rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]),
        },
        TransformKind::JpegCompress => TransformSpec::JpegCompress {
            quality: rng.random_range(cfg.jpeg_quality[0]..=cfg.jpeg_quality[1]),
        },
        TransformKind::GaussianNoise => TransformSpec::GaussianNoise {
            std: rng.random_range(cfg.noise_std[0]..=cfg.noise_std[1]),
            seed: rng.random(),
        },
        TransformKind::RandomResize => TransformSpec::RandomResize {
            scale: rng.random_range(cfg.resize_scale[0]..=cfg.resize_scale[1]),
        },
        TransformKind::Identity => TransformSpec::Identity,
    }
}

fn resize_ops(h: usize, w: usize, scale: f64) -> Result<(SeparableOp, SeparableOp)> {
    let mh = ((h as f64 * scale).round() as usize).max(1);
    let mw = ((w as f64 * scale).round() as usize).max(1);
    Ok((SeparableOp::bilinear(h, w, mh, mw)?, SeparableOp::bilinear(mh, mw, h, w)?))
}

/// Output before the final clamp to `[0, 1]`.
fn forward_unclamped(spec: &TransformSpec, img: &ImageTensor) -> Result<Tensor3> {
    let x = img.tensor();
    match *spec {
        TransformSpec::Identity => Ok(x.clone()),
        TransformSpec::GaussianBlur { sigma } => SeparableOp::gaussian_blur(img.height(), img.width(), sigma)?.apply(x),
        TransformSpec::RandomResize { scale } => {
            let (down, up) = resize_ops(img.height(), img.width(), scale)?;
            up.apply(&down.apply(x)?)
        }
        TransformSpec::GaussianNoise { std, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Tensor3::from_fn(x.shape(), |_, _, _| rng.sample::<f64, _>(StandardNormal));
            x.zip_map(&noise, |v, n| v + std * n)
        }
        TransformSpec::JpegCompress { quality } => Ok(jpeg_surrogate(x, quality)),
    }
}

/// Applies `spec`; the output keeps the input shape and lies in `[0, 1]`
/// (identity returns the input unchanged).
pub fn apply_transform(spec: &TransformSpec, img: &ImageTensor) -> Result<ImageTensor> {
    spec.validate()?;
    if let TransformSpec::Identity = spec {
        return Ok(img.clone());
    }
    let y = forward_unclamped(spec, img)?;
    ImageTensor::from_tensor(y.map(|v| v.clamp(0.0, 1.0)))
}

/// Gradient with respect to the transform input, given the gradient with
/// respect to its output.
pub fn transform_vjp(spec: &TransformSpec, img: &ImageTensor, grad: &Tensor3) -> Result<Tensor3> {
    spec.validate()?;
    img.tensor().ensure_same_shape(grad, "transform gradient")?;
    if let TransformSpec::Identity = spec {
        return Ok(grad.clone());
    }
    let pre = forward_unclamped(spec, img)?;
    let masked = grad.zip_map(&pre, |g, p| if (0.0..=1.0).contains(&p) { g } else { 0.0 })?;
    match *spec {
        TransformSpec::GaussianBlur { sigma } => {
            SeparableOp::gaussian_blur(img.height(), img.width(), sigma)?.transpose(&masked)
        }
        TransformSpec::RandomResize { scale } => {
            let (down, up) = resize_ops(img.height(), img.width(), scale)?;
            down.transpose(&up.transpose(&masked)?)
        }
        _ => Ok(masked),
    }
}

const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29,
    51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120,
    101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_TABLE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quality-scaled quantization table, libjpeg convention.
pub fn quant_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Quantize-dequantize one plane of level-shifted samples, edge-padded to
/// whole 8x8 blocks.
fn jpeg_plane(plane: &[f64], h: usize, w: usize, table: &[f64; 64], basis: &[[f64; 8]; 8]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    let mut block = [[0.0; 8]; 8];
    let mut tmp = [[0.0; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for (i, row) in block.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = plane[(by + i).min(h - 1) * w + (bx + j).min(w - 1)];
                }
            }
            // Forward 2-D DCT: B X B^T.
            for u in 0..8 {
                for j in 0..8 {
                    tmp[u][j] = (0..8).map(|i| basis[u][i] * block[i][j]).sum();
                }
            }
            for u in 0..8 {
                for v in 0..8 {
                    let c: f64 = (0..8).map(|j| tmp[u][j] * basis[v][j]).sum();
                    let q = table[u * 8 + v];
                    block[u][v] = (c / q).round() * q;
                }
            }
            // Inverse: B^T C B.
            for i in 0..8 {
                for v in 0..8 {
                    tmp[i][v] = (0..8).map(|u| basis[u][i] * block[u][v]).sum();
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    let y = by + i;
                    let x = bx + j;
                    if y < h && x < w {
                        out[y * w + x] = (0..8).map(|v| tmp[i][v] * basis[v][j]).sum();
                    }
                }
            }
        }
    }
    out
}

/// JPEG round trip in full-resolution YCbCr without entropy coding or chroma
/// subsampling. Output is not clamped.
pub fn jpeg_surrogate(x: &Tensor3, quality: u8) -> Tensor3 {
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let (r, g, b) = (x.plane(0), x.plane(1), x.plane(2));
    let mut ycc = vec![vec![0.0; n]; 3];
    for i in 0..n {
        let (rr, gg, bb) = (255.0 * r[i], 255.0 * g[i], 255.0 * b[i]);
        ycc[0][i] = 0.299 * rr + 0.587 * gg + 0.114 * bb - 128.0;
        ycc[1][i] = -0.168_736 * rr - 0.331_264 * gg + 0.5 * bb;
        ycc[2][i] = 0.5 * rr - 0.418_688 * gg - 0.081_312 * bb;
    }
    let basis = dct_basis();
    let luma = quant_table(&LUMA_TABLE, quality);
    let chroma = quant_table(&CHROMA_TABLE, quality);
    let yq = jpeg_plane(&ycc[0], h, w, &luma, &basis);
    let cbq = jpeg_plane(&ycc[1], h, w, &chroma, &basis);
    let crq = jpeg_plane(&ycc[2], h, w, &chroma, &basis);
    let mut out = Tensor3::zeros(x.shape());
    for i in 0..n {
        let (yy, cb, cr) = (yq[i] + 128.0, cbq[i], crq[i]);
        out.plane_mut(0)[i] = (yy + 1.402 * cr) / 255.0;
        out.plane_mut(1)[i] = (yy - 0.344_136 * cb - 0.714_136 * cr) / 255.0;
        out.plane_mut(2)[i] = (yy + 1.772 * cb) / 255.0;
    }
    out
}
