//! Evaluation-time countermeasures, parameter sweeps over them, and the
//! interpolate-and-average purification attack.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::jpeg_roundtrip;
use crate::metrics::MetricReport;
use crate::resample::SeparableOp;
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountermeasureKind {
    Jpeg,
    GaussianBlur,
    GaussianNoise,
    MedianBlur,
    BitSqueeze,
}

impl CountermeasureKind {
    pub const ALL: [CountermeasureKind; 5] = [
        CountermeasureKind::Jpeg,
        CountermeasureKind::GaussianBlur,
        CountermeasureKind::GaussianNoise,
        CountermeasureKind::MedianBlur,
        CountermeasureKind::BitSqueeze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CountermeasureKind::Jpeg => "jpeg",
            CountermeasureKind::GaussianBlur => "blur",
            CountermeasureKind::GaussianNoise => "noise",
            CountermeasureKind::MedianBlur => "median",
            CountermeasureKind::BitSqueeze => "bits",
        }
    }

    /// Parameter levels used when a sweep names only the kind.
    pub fn default_levels(self) -> Vec<f64> {
        match self {
            CountermeasureKind::Jpeg => vec![95.0, 90.0, 85.0, 80.0, 75.0],
            CountermeasureKind::GaussianBlur => vec![1.0, 1.5, 2.0, 2.5, 3.0],
            CountermeasureKind::GaussianNoise => vec![0.01, 0.02, 0.03, 0.04, 0.05],
            CountermeasureKind::MedianBlur => vec![3.0, 5.0, 7.0, 9.0],
            CountermeasureKind::BitSqueeze => vec![7.0, 6.0, 5.0, 4.0, 3.0],
        }
    }

    pub fn validate(self, param: f64) -> Result<()> {
        let integral = param.fract() == 0.0 && param.is_finite();
        let ok = match self {
            CountermeasureKind::Jpeg => integral && (1.0..=100.0).contains(&param),
            CountermeasureKind::GaussianBlur => param > 0.0 && param.is_finite(),
            CountermeasureKind::GaussianNoise => param >= 0.0 && param.is_finite(),
            CountermeasureKind::MedianBlur => integral && param >= 3.0 && param % 2.0 == 1.0,
            CountermeasureKind::BitSqueeze => integral && (1.0..=8.0).contains(&param),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{param} is not a valid {self} parameter")))
        }
    }
}

impl fmt::Display for CountermeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CountermeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "jpeg" | "jpg" => CountermeasureKind::Jpeg,
            "blur" | "gaussian_blur" => CountermeasureKind::GaussianBlur,
            "noise" | "gaussian_noise" => CountermeasureKind::GaussianNoise,
            "median" | "median_blur" => CountermeasureKind::MedianBlur,
            "bits" | "bit_squeeze" => CountermeasureKind::BitSqueeze,
            other => return Err(Error::invalid(format!("unknown countermeasure `{other}`"))),
        })
    }
}

/// Applies a countermeasure with a fixed noise seed.
pub fn apply_countermeasure(kind: CountermeasureKind, param: f64, img: &ImageTensor) -> Result<ImageTensor> {
    apply_countermeasure_seeded(kind, param, img, 0)
}

/// Output keeps the input shape and lies in `[0, 1]`; `seed` only affects
/// Gaussian noise.
pub fn apply_countermeasure_seeded(kind: CountermeasureKind, param: f64, img: &ImageTensor, seed: u64) -> Result<ImageTensor> {
    kind.validate(param)?;
    let x = img.tensor();
    let out = match kind {
        CountermeasureKind::Jpeg => return jpeg_roundtrip(img, param as u8),
        CountermeasureKind::GaussianBlur => SeparableOp::gaussian_blur(img.height(), img.width(), param)?.apply(x)?,
        CountermeasureKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Tensor3::from_fn(x.shape(), |_, _, _| rng.sample::<f64, _>(StandardNormal));
            x.zip_map(&noise, |v, n| v + param * n)?
        }
        CountermeasureKind::MedianBlur => median_blur(x, param as usize),
        CountermeasureKind::BitSqueeze => {
            let levels = ((1u32 << param as u32) - 1) as f64;
            x.map(|v| (v.clamp(0.0, 1.0) * levels).round() / levels)
        }
    };
    ImageTensor::from_tensor(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Per-channel spatial median with replicated borders.
fn median_blur(x: &Tensor3, k: usize) -> Tensor3 {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = Tensor3::zeros(x.shape());
    for c in 0..x.channels() {
        let plane = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y + dy).clamp(0, h - 1);
                        let xc = (xx + dx).clamp(0, w - 1);
                        window.push(plane[(yy * w + xc) as usize]);
                    }
                }
                let mid = window.len() / 2;
                window.select_nth_unstable_by(mid, f64::total_cmp);
                dst[(y * w + xx) as usize] = window[mid];
            }
        }
    }
    out
}

/// One countermeasure with an ordered list of parameter levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub kind: CountermeasureKind,
    pub params: Vec<f64>,
}

impl SweepAxis {
    pub fn new(kind: CountermeasureKind, params: Vec<f64>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::invalid(format!("sweep over {kind} has no parameters")));
        }
        for &p in &params {
            kind.validate(p)?;
        }
        Ok(Self { kind, params })
    }

    pub fn default_for(kind: CountermeasureKind) -> Self {
        Self { kind, params: kind.default_levels() }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    /// `kind` or `kind:p1,p2,...`, e.g. `jpeg:95,75,50`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None => Ok(Self::default_for(s.parse()?)),
            Some((kind, list)) => {
                let params = list
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| p.trim().parse::<f64>().map_err(|e| Error::invalid(format!("bad sweep parameter `{p}`: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                Self::new(kind.parse()?, params)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    Protected,
    /// The unprotected image under the same countermeasure.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub series: Series,
    pub param: f64,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: CountermeasureKind,
    /// Protected image without any countermeasure.
    pub untransformed: MetricReport,
    /// Clean image without any countermeasure: the reference line.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub baseline: Option<MetricReport>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn series(&self, s: Series) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.series == s)
    }

    /// Long-format delimited text: `series,kind,param,metric,value`.
    /// Untransformed and baseline rows use an empty parameter.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["series", "kind", "param", "metric", "value"])?;
        let mut emit = |series: &str, param: String, report: &MetricReport| -> Result<()> {
            for (m, e) in &report.metrics {
                let value = e.value.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([series, self.kind.as_str(), &param, m.as_str(), &value])?;
            }
            Ok(())
        };
        emit("protected_untransformed", String::new(), &self.untransformed)?;
        if let Some(b) = &self.baseline {
            emit("clean_untransformed", String::new(), b)?;
        }
        for r in &self.rows {
            let name = match r.series {
                Series::Protected => "protected",
                Series::Clean => "clean",
            };
            emit(name, r.param.to_string(), &r.report)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Applies each level of `axis` to the protected image (and the clean one,
/// when given) and evaluates the result with `downstream`.
pub fn sweep(
    protected: &ImageTensor,
    clean: Option<&ImageTensor>,
    axis: &SweepAxis,
    seed: u64,
    mut downstream: impl FnMut(&ImageTensor) -> Result<MetricReport>,
) -> Result<SweepTable> {
    let axis = SweepAxis::new(axis.kind, axis.params.clone())?;
    let untransformed = downstream(protected)?;
    let baseline = clean.map(&mut downstream).transpose()?;
    let mut rows = Vec::new();
    for &p in &axis.params {
        let img = apply_countermeasure_seeded(axis.kind, p, protected, seed)?;
        rows.push(SweepRow { series: Series::Protected, param: p, report: downstream(&img)? });
    }
    if let Some(c) = clean {
        for &p in &axis.params {
            let img = apply_countermeasure_seeded(axis.kind, p, c, seed)?;
            rows.push(SweepRow { series: Series::Clean, param: p, report: downstream(&img)? });
        }
    }
    Ok(SweepTable { kind: axis.kind, untransformed, baseline, rows })
}

/// Averages the four midpoints of adjacent pairs among five images, which
/// weights them `(1, 2, 2, 2, 1) / 8`. No clamping.
pub fn interpolate_average_purify(images: &[ImageTensor]) -> Result<ImageTensor> {
    if images.len() != 5 {
        return Err(Error::invalid(format!("purification needs exactly 5 images, got {}", images.len())));
    }
    let shape = images[0].shape();
    let mut acc = Tensor3::zeros(shape);
    for pair in images.windows(2) {
        let mid = pair[0].tensor().zip_map(pair[1].tensor(), |a, b| 0.5 * (a + b))?;
        acc.axpy(0.25, &mid)?;
    }
    ImageTensor::from_tensor(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::quantize_u8;
    use crate::metrics::{evaluate, Embedders, Metric};
    use crate::tensor::{FrameSequence, Shape};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, h, w), |_, _, _| rng.random_range(0.0..1.0))).unwrap()
    }

    #[test]
    fn bit_squeeze_cases() {
        let img = quantize_u8(&random_image(0, 10, 10)).unwrap();
        assert_eq!(apply_countermeasure(CountermeasureKind::BitSqueeze, 8.0, &img).unwrap(), img);
        let one = apply_countermeasure(CountermeasureKind::BitSqueeze, 1.0, &img).unwrap();
        assert!(one.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn median_removes_salt() {
        let mut t = Tensor3::filled(Shape::new(3, 9, 9), 0.3);
        let i = t.index(1, 4, 4);
        t.data_mut()[i] = 1.0;
        let img = ImageTensor::from_tensor(t).unwrap();
        let out = apply_countermeasure(CountermeasureKind::MedianBlur, 3.0, &img).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.3));
    }

    #[test]
    fn invalid_params() {
        let img = random_image(1, 8, 8);
        for (k, p) in [
            (CountermeasureKind::MedianBlur, 4.0),
            (CountermeasureKind::MedianBlur, 1.0),
            (CountermeasureKind::BitSqueeze, 0.0),
            (CountermeasureKind::BitSqueeze, 9.0),
            (CountermeasureKind::Jpeg, 0.0),
            (CountermeasureKind::Jpeg, 101.0),
            (CountermeasureKind::Jpeg, 50.5),
            (CountermeasureKind::GaussianBlur, 0.0),
            (CountermeasureKind::GaussianNoise, -0.1),
        ] {
            assert!(apply_countermeasure(k, p, &img).is_err(), "{k} {p}");
        }
    }

    #[test]
    fn axis_parsing() {
        let a: SweepAxis = "jpeg:95,75,50".parse().unwrap();
        assert_eq!(a, SweepAxis { kind: CountermeasureKind::Jpeg, params: vec![95.0, 75.0, 50.0] });
        let d: SweepAxis = "median".parse().unwrap();
        assert_eq!(d.params, vec![3.0, 5.0, 7.0, 9.0]);
        assert!("median:4".parse::<SweepAxis>().is_err());
        assert!("jpeg:".parse::<SweepAxis>().is_err());
        assert!("sharpen:1".parse::<SweepAxis>().is_err());
        for k in CountermeasureKind::ALL {
            assert_eq!(k.as_str().parse::<CountermeasureKind>().unwrap(), k);
            assert!(SweepAxis::new(k, k.default_levels()).is_ok());
        }
    }

    fn psnr_against(reference: ImageTensor) -> impl FnMut(&ImageTensor) -> Result<MetricReport> {
        move |img| {
            evaluate(
                &FrameSequence::single(reference.clone()),
                &FrameSequence::single(img.clone()),
                &Embedders::default(),
                None,
                &[Metric::Psnr],
            )
        }
    }

    #[test]
    fn sweep_cardinality_and_series() {
        let clean = quantize_u8(&random_image(2, 16, 16)).unwrap();
        let protected = quantize_u8(&random_image(3, 16, 16)).unwrap();
        let axis: SweepAxis = "blur:1,1.5,2,2.5,3".parse().unwrap();
        let table = sweep(&protected, Some(&clean), &axis, 0, psnr_against(clean.clone())).unwrap();
        assert_eq!(table.series(Series::Protected).count(), 5);
        assert_eq!(table.series(Series::Clean).count(), 5);
        assert_eq!(table.baseline.as_ref().unwrap().value(Metric::Psnr), Some(crate::metrics::PSNR_CAP_DB));

        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 + 10);
        assert!(text.starts_with("series,kind,param,metric,value"));

        let only = sweep(&protected, None, &axis, 0, psnr_against(clean)).unwrap();
        assert_eq!(only.rows.len(), 5);
        assert!(only.baseline.is_none());
    }

    #[test]
    fn jpeg_quality_100_is_near_identity() {
        let clean = quantize_u8(&random_image(4, 16, 16)).unwrap();
        let smooth = ImageTensor::from_tensor(
            SeparableOp::gaussian_blur(16, 16, 2.0).unwrap().apply(clean.tensor()).unwrap(),
        )
        .unwrap();
        let smooth = quantize_u8(&smooth).unwrap();
        let axis = SweepAxis::new(CountermeasureKind::Jpeg, vec![100.0]).unwrap();
        let table = sweep(&smooth, None, &axis, 0, psnr_against(smooth.clone())).unwrap();
        let row = table.rows[0].report.value(Metric::Psnr).unwrap();
        // Untransformed is the cap; quality 100 stays within codec rounding.
        assert!(row > 45.0, "{row}");
    }

    #[test]
    fn purify_cases() {
        let same = vec![random_image(5, 8, 8); 5];
        assert_eq!(interpolate_average_purify(&same).unwrap(), same[0]);
        let ramp: Vec<_> = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|v| ImageTensor::filled(8, 8, *v).unwrap()).collect();
        assert!(interpolate_average_purify(&ramp).unwrap().data().iter().all(|v| *v == 0.5));
        assert!(interpolate_average_purify(&same[..4]).is_err());
        let mut mixed = same.clone();
        mixed[2] = ImageTensor::filled(9, 8, 0.5).unwrap();
        assert!(interpolate_average_purify(&mixed).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn countermeasures_preserve_shape_and_range(seed in 0u64..1000, k in 0usize..5) {
            let kind = CountermeasureKind::ALL[k];
            let img = random_image(seed, 8 + (seed % 7) as usize, 8 + (seed % 5) as usize);
            for &p in &kind.default_levels() {
                let out = apply_countermeasure_seeded(kind, p, &img, seed).unwrap();
                prop_assert_eq!(out.shape(), img.shape());
                prop_assert!(out.is_valid());
            }
        }

        #[test]
        fn purify_is_linear(seed in 0u64..1000, a in -3.0f64..3.0) {
            let imgs: Vec<_> = (0..5).map(|i| random_image(seed * 5 + i, 8, 8)).collect();
            let scaled: Vec<_> = imgs.iter().map(|i| ImageTensor::from_tensor(i.tensor().scale(a)).unwrap()).collect();
            let lhs = interpolate_average_purify(&scaled).unwrap();
            let rhs = interpolate_average_purify(&imgs).unwrap().tensor().scale(a);
            prop_assert!(lhs.tensor().sub(&rhs).unwrap().max_abs() < 1e-12);
        }
    }
}
