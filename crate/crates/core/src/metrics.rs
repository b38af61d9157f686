//! Image and video quality metrics: PSNR, SSIM, the Fréchet family
//! (FID, FID-VID, FVD), cosine-similarity scores, and a report that
//! gathers them.
//!
//! Feature networks for the embedding metrics are plugins; the toy adapters
//! here exist for testing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::{PerceptualDistance, SemanticEncoder};
use crate::resample::gaussian_kernel;
use crate::tensor::{mse, FrameSequence, ImageTensor};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Frames per clip for the video-level Fréchet metrics.
pub const CLIP_FRAMES: usize = 16;

/// Data range 1.0, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a.tensor(), b.tensor())?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP_DB))
}

/// Mean local SSIM over the valid region of an 11x11 Gaussian window,
/// averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.tensor().ensure_same_shape(b.tensor(), "ssim inputs")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let k = gaussian_kernel(SSIM_SIGMA);
    debug_assert_eq!(k.len(), SSIM_WINDOW);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);

    // Separable valid filtering: rows first, then columns.
    let filter = |plane: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        out
    };

    let mut total = 0.0;
    let channels = a.tensor().channels();
    for c in 0..channels {
        let (pa, pb) = (a.tensor().plane(c), b.tensor().plane(c));
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let (mu_a, mu_b) = (filter(pa), filter(pb));
        let (e_aa, e_bb, e_ab) = (filter(&aa), filter(&bb), filter(&ab));
        let mut sum = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (oh * ow) as f64;
    }
    Ok(total / channels as f64)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`, computing the trace
/// term as `Tr((A S2 A)^(1/2))` with `A = S1^(1/2)`; negative eigenvalues
/// are clipped to zero.
pub fn frechet_distance(mu1: &DVector<f64>, cov1: &DMatrix<f64>, mu2: &DVector<f64>, cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::shape(format!(
            "Gaussian dimensions differ: mean {d} / {}, covariance {:?} / {:?}",
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    let (c1, c2) = (symmetrize(cov1), symmetrize(cov2));
    let a = psd_sqrt(&c1);
    let inner = symmetrize(&(&a * &c2 * &a));
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + c1.trace() + c2.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `n` embeddings of equal dimension from one embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embedder: String,
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(embedder: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("embedding set must contain non-empty vectors"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::shape(format!("embedding {i} has {} dims, expected {dim}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("embedding {i} has non-finite values")));
            }
        }
        Ok(Self { embedder: embedder.into(), dim, rows })
    }

    pub fn embedder(&self) -> &str {
        &self.embedder
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Sample mean and unbiased covariance.
    pub fn fit(&self) -> Result<GaussianFit> {
        let n = self.rows.len();
        if n < 2 {
            return Err(Error::invalid(format!("a Gaussian fit needs at least 2 embeddings, got {n}")));
        }
        let mut mean = DVector::zeros(self.dim);
        for r in &self.rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for r in &self.rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(GaussianFit { mean, cov })
    }
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid_family(reference: &EmbeddingSet, generated: &EmbeddingSet) -> Result<f64> {
    if reference.embedder != generated.embedder {
        return Err(Error::invalid(format!(
            "embedding sets come from different embedders: `{}` vs `{}`",
            reference.embedder, generated.embedder
        )));
    }
    let (a, b) = (reference.fit()?, generated.fit()?);
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Consecutive non-overlapping chunks of `size` frames; a shorter tail is
/// dropped.
pub fn chunk_frames<T>(frames: &[T], size: usize) -> Vec<&[T]> {
    if size == 0 {
        return Vec::new();
    }
    frames.chunks_exact(size).collect()
}

/// Mean cosine similarity over every (reference, generated) pair.
pub fn cosine_similarity_mean(reference: &EmbeddingSet, generated: &EmbeddingSet) -> Result<f64> {
    if reference.dim != generated.dim {
        return Err(Error::shape(format!("embedding dims {} vs {}", reference.dim, generated.dim)));
    }
    let unit = |rows: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    Err(Error::invalid("cosine similarity of a zero vector is undefined"))
                } else {
                    Ok(r.iter().map(|v| v / n).collect())
                }
            })
            .collect()
    };
    let (a, b) = (unit(&reference.rows)?, unit(&generated.rows)?);
    let mut sum = 0.0;
    for x in &a {
        for y in &b {
            sum += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        }
    }
    Ok((sum / (a.len() * b.len()) as f64).clamp(-1.0, 1.0))
}

/// Per-frame feature network.
pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Clip-level feature network over [`CLIP_FRAMES`] consecutive frames.
pub trait ClipEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_clip(&self, frames: &[ImageTensor]) -> Result<Vec<f64>>;
}

/// Any semantic encoder doubles as an image embedder.
pub struct SemanticImageEmbedder(pub Arc<dyn SemanticEncoder>);

impl ImageEmbedder for SemanticImageEmbedder {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.0.embed(image)
    }
}

/// Clip embedding made of the mean frame embedding followed by the mean
/// absolute change between consecutive frame embeddings.
pub struct MeanMotionClipEmbedder {
    name: String,
    inner: Arc<dyn ImageEmbedder>,
}

impl MeanMotionClipEmbedder {
    pub fn new(inner: Arc<dyn ImageEmbedder>) -> Self {
        Self { name: format!("mean-motion({})", inner.name()), inner }
    }
}

impl ClipEmbedder for MeanMotionClipEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_clip(&self, frames: &[ImageTensor]) -> Result<Vec<f64>> {
        if frames.is_empty() {
            return Err(Error::invalid("empty clip"));
        }
        let embs = frames.iter().map(|f| self.inner.embed(f)).collect::<Result<Vec<_>>>()?;
        let d = embs[0].len();
        let mut out = vec![0.0; 2 * d];
        for e in &embs {
            for (o, v) in out[..d].iter_mut().zip(e) {
                *o += v / embs.len() as f64;
            }
        }
        if embs.len() > 1 {
            for pair in embs.windows(2) {
                for (i, o) in out[d..].iter_mut().enumerate() {
                    *o += (pair[1][i] - pair[0][i]).abs() / (embs.len() - 1) as f64;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    FidVid,
    Fvd,
    Lpips,
    Fid,
    Psnr,
    Ssim,
    ClipI,
    Dino,
}

/// Which direction of change indicates stronger protection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Metric {
    pub const ALL: [Metric; 8] =
        [Metric::FidVid, Metric::Fvd, Metric::Lpips, Metric::Fid, Metric::Psnr, Metric::Ssim, Metric::ClipI, Metric::Dino];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::FidVid => "fid_vid",
            Metric::Fvd => "fvd",
            Metric::Lpips => "lpips",
            Metric::Fid => "fid",
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::ClipI => "clip_i",
            Metric::Dino => "dino",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Metric::FidVid | Metric::Fvd | Metric::Lpips | Metric::Fid => Direction::Up,
            Metric::Psnr | Metric::Ssim | Metric::ClipI | Metric::Dino => Direction::Down,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

/// Parses a comma-separated metric list; `all` selects every metric.
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>> {
    if s.trim() == "all" {
        return Ok(Metric::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let m: Metric = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("metric list is empty"));
    }
    Ok(out)
}

/// Feature networks available to [`evaluate`]; a missing entry skips the
/// metrics that need it.
#[derive(Clone, Default)]
pub struct Embedders {
    pub fid: Option<Arc<dyn ImageEmbedder>>,
    pub fid_vid: Option<Arc<dyn ClipEmbedder>>,
    pub fvd: Option<Arc<dyn ClipEmbedder>>,
    pub clip_i: Option<Arc<dyn ImageEmbedder>>,
    pub dino: Option<Arc<dyn ImageEmbedder>>,
}

impl Embedders {
    /// Every slot backed by the toy semantic encoder.
    pub fn toy(semantic: Arc<dyn SemanticEncoder>) -> Self {
        let image: Arc<dyn ImageEmbedder> = Arc::new(SemanticImageEmbedder(semantic));
        let clip: Arc<dyn ClipEmbedder> = Arc::new(MeanMotionClipEmbedder::new(image.clone()));
        Self {
            fid: Some(image.clone()),
            fid_vid: Some(clip.clone()),
            fvd: Some(clip),
            clip_i: Some(image.clone()),
            dino: Some(image),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub direction: Direction,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_frame: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
}

impl MetricEntry {
    fn value(metric: Metric, value: f64) -> Self {
        Self { direction: metric.direction(), value: Some(value), per_frame: None, skipped: None }
    }

    fn skipped(metric: Metric, reason: impl Into<String>) -> Self {
        Self { direction: metric.direction(), value: None, per_frame: None, skipped: Some(reason.into()) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<Metric, MetricEntry>,
}

impl MetricReport {
    pub fn value(&self, m: Metric) -> Option<f64> {
        self.metrics.get(&m).and_then(|e| e.value)
    }

    pub fn skipped(&self, m: Metric) -> Option<&str> {
        self.metrics.get(&m).and_then(|e| e.skipped.as_deref())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Mean of each metric over several per-video reports. A metric skipped
    /// in any report is skipped in the aggregate.
    pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("nothing to aggregate"));
        }
        let mut out = MetricReport::default();
        for m in reports[0].metrics.keys() {
            let mut vals = Vec::with_capacity(reports.len());
            let mut reason = None;
            for r in reports {
                match r.metrics.get(m) {
                    Some(MetricEntry { value: Some(v), .. }) => vals.push(*v),
                    Some(MetricEntry { skipped: Some(s), .. }) => reason = Some(s.clone()),
                    _ => reason = Some("missing from some reports".to_string()),
                }
            }
            let entry = match reason {
                Some(r) => MetricEntry::skipped(*m, r),
                None => MetricEntry::value(*m, vals.iter().sum::<f64>() / vals.len() as f64),
            };
            out.metrics.insert(*m, entry);
        }
        Ok(out)
    }
}

fn frame_pairs<'a>(reference: &'a FrameSequence, generated: &'a FrameSequence) -> Result<Vec<(&'a ImageTensor, &'a ImageTensor)>> {
    if reference.shape() != generated.shape() {
        return Err(Error::shape(format!("reference frames {} vs generated {}", reference.shape(), generated.shape())));
    }
    let r = reference.frames();
    let g = generated.frames();
    if r.len() == 1 {
        Ok(g.iter().map(|f| (&r[0], f)).collect())
    } else if r.len() == g.len() {
        Ok(r.iter().zip(g).collect())
    } else {
        Err(Error::shape(format!("{} reference frames cannot be aligned with {} generated frames", r.len(), g.len())))
    }
}

fn embed_all(e: &dyn ImageEmbedder, frames: &[ImageTensor]) -> Result<EmbeddingSet> {
    EmbeddingSet::new(e.name(), frames.iter().map(|f| e.embed(f)).collect::<Result<Vec<_>>>()?)
}

fn embed_clips(e: &dyn ClipEmbedder, frames: &[ImageTensor]) -> Result<Option<EmbeddingSet>> {
    let chunks = chunk_frames(frames, CLIP_FRAMES);
    if chunks.len() < 2 {
        return Ok(None);
    }
    let rows = chunks.iter().map(|c| e.embed_clip(c)).collect::<Result<Vec<_>>>()?;
    Ok(Some(EmbeddingSet::new(e.name(), rows)?))
}

fn frame_metric(pairs: &[(&ImageTensor, &ImageTensor)], f: impl Fn(&ImageTensor, &ImageTensor) -> Result<f64>) -> Result<(f64, Vec<f64>)> {
    let vals = pairs.iter().map(|(r, g)| f(g, r)).collect::<Result<Vec<_>>>()?;
    Ok((vals.iter().sum::<f64>() / vals.len() as f64, vals))
}

/// Computes each requested metric of `generated` against `reference`.
/// A single reference frame is compared with every generated frame;
/// otherwise frames are aligned one to one.
pub fn evaluate(
    reference: &FrameSequence,
    generated: &FrameSequence,
    embedders: &Embedders,
    pd: Option<&dyn PerceptualDistance>,
    requested: &[Metric],
) -> Result<MetricReport> {
    let pairs = frame_pairs(reference, generated)?;
    let mut report = MetricReport::default();
    for &m in requested {
        let entry = match m {
            Metric::Psnr => {
                let (v, per) = frame_metric(&pairs, psnr)?;
                MetricEntry { per_frame: Some(per), ..MetricEntry::value(m, v) }
            }
            Metric::Ssim => {
                if reference.shape().height < SSIM_WINDOW || reference.shape().width < SSIM_WINDOW {
                    MetricEntry::skipped(m, format!("frames are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"))
                } else {
                    let (v, per) = frame_metric(&pairs, ssim)?;
                    MetricEntry { per_frame: Some(per), ..MetricEntry::value(m, v) }
                }
            }
            Metric::Lpips => match pd {
                None => MetricEntry::skipped(m, "no perceptual distance configured"),
                Some(pd) => {
                    let (v, per) = frame_metric(&pairs, |a, b| pd.distance(a, b))?;
                    MetricEntry { per_frame: Some(per), ..MetricEntry::value(m, v) }
                }
            },
            Metric::Fid => match &embedders.fid {
                None => MetricEntry::skipped(m, "no image embedder configured for fid"),
                Some(_) if reference.len() < 2 || generated.len() < 2 => {
                    MetricEntry::skipped(m, "fid needs at least 2 reference and 2 generated frames")
                }
                Some(e) => MetricEntry::value(
                    m,
                    fid_family(&embed_all(e.as_ref(), reference.frames())?, &embed_all(e.as_ref(), generated.frames())?)?,
                ),
            },
            Metric::FidVid | Metric::Fvd => {
                let slot = if m == Metric::FidVid { &embedders.fid_vid } else { &embedders.fvd };
                match slot {
                    None => MetricEntry::skipped(m, format!("no video embedder configured for {m}")),
                    Some(e) => match (embed_clips(e.as_ref(), reference.frames())?, embed_clips(e.as_ref(), generated.frames())?) {
                        (Some(a), Some(b)) => MetricEntry::value(m, fid_family(&a, &b)?),
                        _ => MetricEntry::skipped(
                            m,
                            format!("{m} needs at least {} frames per sequence (2 clips of {CLIP_FRAMES})", 2 * CLIP_FRAMES),
                        ),
                    },
                }
            }
            Metric::ClipI | Metric::Dino => {
                let slot = if m == Metric::ClipI { &embedders.clip_i } else { &embedders.dino };
                match slot {
                    None => MetricEntry::skipped(m, format!("no image embedder configured for {m}")),
                    Some(e) => MetricEntry::value(
                        m,
                        cosine_similarity_mean(
                            &embed_all(e.as_ref(), reference.frames())?,
                            &embed_all(e.as_ref(), generated.frames())?,
                        )?,
                    ),
                }
            }
        };
        report.metrics.insert(m, entry);
    }
    Ok(report)
}
