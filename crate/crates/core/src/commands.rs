//! The `protect`, `evaluate`, and `robustness` workflows behind the command
//! line. Each resolves its configuration and extractors before writing
//! anything, then writes its manifest before any other artifact.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::animate::ToyAnimator;
use crate::config::{AppConfig, InputRecord, RunManifest};
use crate::error::{Error, Result};
use crate::extractors::{ExtractorBundle, Registry};
use crate::io::{read_frames, read_image, write_png};
use crate::metrics::{evaluate, Embedders, Metric, MetricReport};
use crate::pgd::{protect, OptimizationTrace};
use crate::robustness::{interpolate_average_purify, sweep, SweepAxis, SweepTable};
use crate::tensor::{linf_norm, FrameSequence, ImageTensor};

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ProtectArgs {
    pub input: PathBuf,
    /// Protected PNG.
    pub output: PathBuf,
    pub config: AppConfig,
    /// Defaults to `<output stem>.manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Defaults to `<output stem>.trace.jsonl`.
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ProtectOutcome {
    pub output: PathBuf,
    pub manifest: PathBuf,
    pub trace_path: PathBuf,
    pub trace: OptimizationTrace,
    pub linf: f64,
}

/// Final line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub record: String,
    pub config_hash: String,
    pub seed: u64,
    pub eta: f64,
    pub iterations: usize,
    pub version: String,
}

pub fn cmd_protect(args: &ProtectArgs, registry: &Registry) -> Result<ProtectOutcome> {
    let config = args.config.resolved()?;
    let bundle = registry.resolve(&config.extractors)?;
    let image = read_image(&args.input)?;
    let mut manifest = RunManifest::new("protect", config.clone(), Some(bundle.record()))?;
    manifest.inputs.push(InputRecord::of(&args.input)?);
    run_protect(&manifest, &bundle, &image, args)
}

fn run_protect(manifest: &RunManifest, bundle: &ExtractorBundle, image: &ImageTensor, args: &ProtectArgs) -> Result<ProtectOutcome> {
    let manifest_path = args.manifest.clone().unwrap_or_else(|| sibling(&args.output, "manifest.json"));
    let trace_path = args.trace.clone().unwrap_or_else(|| sibling(&args.output, "trace.jsonl"));
    ensure_parent(&manifest_path)?;
    manifest.write(&manifest_path)?;

    let cfg = manifest.config.protection();
    log::info!("protecting {} ({} iterations, budget {:.5})", args.input.display(), cfg.iterations, cfg.eta);
    let result = protect(image, &cfg, bundle)?;

    ensure_parent(&args.output)?;
    write_png(&args.output, &result.protected)?;
    let meta = TraceMetadata {
        record: "metadata".into(),
        config_hash: manifest.config_hash.clone(),
        seed: manifest.seed,
        eta: cfg.eta,
        iterations: cfg.iterations,
        version: manifest.version.clone(),
    };
    ensure_parent(&trace_path)?;
    std::fs::write(&trace_path, result.trace.to_jsonl(&serde_json::to_value(&meta)?)?)?;
    Ok(ProtectOutcome {
        output: args.output.clone(),
        manifest: manifest_path,
        trace_path,
        linf: linf_norm(&result.delta),
        trace: result.trace,
    })
}

/// Re-runs a protect manifest. The input defaults to the recorded path and
/// must match the recorded digest.
pub fn cmd_replay(manifest_path: &Path, input: Option<&Path>, output: &Path, registry: &Registry) -> Result<ProtectOutcome> {
    let recorded = RunManifest::read(manifest_path)?;
    if recorded.command != "protect" {
        return Err(Error::Configuration(format!("cannot replay a `{}` manifest", recorded.command)));
    }
    let record = recorded
        .inputs
        .first()
        .ok_or_else(|| Error::Configuration("manifest records no input".into()))?;
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| record.path.clone());
    let actual = InputRecord::of(&input)?;
    if actual.sha256 != record.sha256 {
        return Err(Error::Configuration(format!(
            "{} does not match the recorded input digest {}",
            input.display(),
            record.sha256
        )));
    }
    let bundle = registry.resolve(&recorded.config.extractors)?;
    if let Some(res) = &recorded.resolution {
        if *res != bundle.record() {
            return Err(Error::Resolution("extractor bindings differ from the recorded run".into()));
        }
    }
    let image = read_image(&input)?;
    let mut manifest = recorded.clone();
    manifest.inputs = vec![actual];
    let args = ProtectArgs { input, output: output.to_path_buf(), config: recorded.config, manifest: None, trace: None };
    run_protect(&manifest, &bundle, &image, &args)
}

fn embedders_for(config: &AppConfig, bundle: &ExtractorBundle) -> Result<Embedders> {
    match config.evaluate.embedders.as_str() {
        "toy" => Ok(Embedders::toy(bundle.semantic.clone())),
        "toy-image" => Ok(Embedders { fid_vid: None, fvd: None, ..Embedders::toy(bundle.semantic.clone()) }),
        "none" => Ok(Embedders::default()),
        other => Err(Error::Configuration(format!("unknown embedder family `{other}` (expected toy, toy-image, none)"))),
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    /// Image file or directory of frames.
    pub reference: PathBuf,
    /// Directory of frames (or a single image).
    pub generated: PathBuf,
    /// Report JSON; the manifest goes next to it.
    pub output: PathBuf,
    pub config: AppConfig,
}

pub fn cmd_evaluate(args: &EvaluateArgs, registry: &Registry) -> Result<MetricReport> {
    let config = args.config.resolved()?;
    let bundle = registry.resolve(&config.extractors)?;
    let embedders = embedders_for(&config, &bundle)?;
    let reference = read_frames(&args.reference)?;
    let generated = read_frames(&args.generated)?;
    let mut manifest = RunManifest::new("evaluate", config.clone(), Some(bundle.record()))?;
    manifest.inputs = vec![InputRecord { path: args.reference.clone(), sha256: String::new() }, InputRecord {
        path: args.generated.clone(),
        sha256: String::new(),
    }];
    ensure_parent(&args.output)?;
    manifest.write(&sibling(&args.output, "manifest.json"))?;
    let report = evaluate(&reference, &generated, &embedders, Some(bundle.perceptual.as_ref()), &config.evaluate.metrics)?;
    std::fs::write(&args.output, report.to_json()? + "\n")?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RobustnessArgs {
    /// Protected image for sweeps.
    pub input: Option<PathBuf>,
    /// Unprotected original; enables the clean series and serves as the
    /// animation reference.
    pub clean: Option<PathBuf>,
    /// Sweep axes; empty means the configured defaults.
    pub sweeps: Vec<SweepAxis>,
    /// Exactly five images to purify.
    pub purify: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub config: AppConfig,
}

#[derive(Debug, Clone, Default)]
pub struct RobustnessOutcome {
    pub tables: Vec<SweepTable>,
    pub purified: Option<PathBuf>,
}

/// Downstream evaluation for sweeps: animate the (transformed) image with the
/// toy pipeline and compare against the animation of `reference`.
pub struct ToyDownstream {
    animator: ToyAnimator,
    reference: FrameSequence,
    embedders: Embedders,
    perceptual: Arc<dyn crate::extractors::PerceptualDistance>,
    metrics: Vec<Metric>,
    seed: u64,
}

impl ToyDownstream {
    pub fn new(bundle: &ExtractorBundle, reference: &ImageTensor, metrics: Vec<Metric>, seed: u64) -> Result<Self> {
        let animator = ToyAnimator::new(bundle.clone(), seed)?;
        let reference = animator.animate(reference, seed)?;
        Ok(Self {
            animator,
            reference,
            embedders: Embedders::toy(bundle.semantic.clone()),
            perceptual: bundle.perceptual.clone(),
            metrics,
            seed,
        })
    }

    pub fn evaluate(&self, image: &ImageTensor) -> Result<MetricReport> {
        let generated = self.animator.animate(image, self.seed.wrapping_add(1))?;
        evaluate(&self.reference, &generated, &self.embedders, Some(self.perceptual.as_ref()), &self.metrics)
    }
}

pub fn cmd_robustness(args: &RobustnessArgs, registry: &Registry) -> Result<RobustnessOutcome> {
    if args.input.is_none() && args.purify.is_empty() {
        return Err(Error::invalid("nothing to do: give an input image to sweep or five images to purify"));
    }
    if !args.purify.is_empty() && args.purify.len() != 5 {
        return Err(Error::invalid(format!("purification needs exactly 5 images, got {}", args.purify.len())));
    }
    let config = args.config.resolved()?;
    let bundle = registry.resolve(&config.extractors)?;
    let axes = if args.sweeps.is_empty() { config.robustness.axes()? } else { args.sweeps.clone() };
    let protected = args.input.as_deref().map(read_image).transpose()?;
    let clean = args.clean.as_deref().map(read_image).transpose()?;
    let purify_inputs = args.purify.iter().map(|p| read_image(p)).collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(&args.output_dir)?;
    let mut manifest = RunManifest::new("robustness", config.clone(), Some(bundle.record()))?;
    for p in args.input.iter().chain(&args.clean).chain(&args.purify) {
        manifest.inputs.push(InputRecord::of(p)?);
    }
    manifest.write(&args.output_dir.join("manifest.json"))?;

    let mut outcome = RobustnessOutcome::default();
    if let Some(protected) = &protected {
        let reference = clean.as_ref().unwrap_or(protected);
        let downstream = ToyDownstream::new(&bundle, reference, config.robustness.metrics.clone(), config.robustness.seed)?;
        for axis in &axes {
            let table = sweep(protected, clean.as_ref(), axis, config.robustness.seed, |img| downstream.evaluate(img))?;
            let base = args.output_dir.join(format!("sweep_{}", axis.kind));
            let file = std::fs::File::create(base.with_extension("csv"))?;
            table.write_csv(std::io::BufWriter::new(file))?;
            std::fs::write(base.with_extension("json"), serde_json::to_string_pretty(&table)? + "\n")?;
            outcome.tables.push(table);
        }
    }
    if !purify_inputs.is_empty() {
        let out = interpolate_average_purify(&purify_inputs)?;
        let path = args.output_dir.join("purified.png");
        write_png(&path, &out)?;
        outcome.purified = Some(path);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::write_frames;
    use crate::tensor::{Shape, Tensor3};

    fn write_test_image(path: &Path, seed: u64) -> ImageTensor {
        let img = ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, 16, 16), |c, y, x| {
            (((c as u64 * 31 + y as u64 * 7 + x as u64 * 3 + seed * 11) % 200) as f64 + 20.0) / 255.0
        }))
        .unwrap();
        write_png(path, &img).unwrap();
        img
    }

    fn quick_config() -> AppConfig {
        let mut c = AppConfig::default();
        c.protect.iterations = 3;
        c.protect.frames = 2;
        c
    }

    #[test]
    fn protect_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.png");
        write_test_image(&input, 0);
        let args = ProtectArgs { input, output: dir.path().join("out/protected.png"), config: quick_config(), manifest: None, trace: None };
        let out = cmd_protect(&args, &Registry::with_builtin()).unwrap();
        assert!(out.output.exists());
        assert_eq!(out.manifest, dir.path().join("out/protected.manifest.json"));
        let trace = std::fs::read_to_string(&out.trace_path).unwrap();
        let last: TraceMetadata = serde_json::from_str(trace.lines().last().unwrap()).unwrap();
        let manifest = RunManifest::read(&out.manifest).unwrap();
        assert_eq!(last.config_hash, manifest.config_hash);
        assert_eq!(trace.lines().count(), 4);
    }

    #[test]
    fn resolution_failure_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.png");
        write_test_image(&input, 0);
        let mut config = quick_config();
        config.extractors.preset = Some("missing".into());
        let out_dir = dir.path().join("out");
        let args = ProtectArgs { input, output: out_dir.join("p.png"), config, manifest: None, trace: None };
        assert!(cmd_protect(&args, &Registry::with_builtin()).is_err());
        assert!(!out_dir.exists());
    }

    #[test]
    fn unreadable_input_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let args = ProtectArgs {
            input: dir.path().join("missing.png"),
            output: dir.path().join("p.png"),
            config: quick_config(),
            manifest: None,
            trace: None,
        };
        assert!(cmd_protect(&args, &Registry::with_builtin()).is_err());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn replay_rejects_changed_input() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.png");
        write_test_image(&input, 0);
        let args = ProtectArgs { input: input.clone(), output: dir.path().join("a.png"), config: quick_config(), manifest: None, trace: None };
        let out = cmd_protect(&args, &Registry::with_builtin()).unwrap();
        write_test_image(&input, 1);
        assert!(cmd_replay(&out.manifest, None, &dir.path().join("b.png"), &Registry::with_builtin()).is_err());
    }

    #[test]
    fn evaluate_copy_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let frames = FrameSequence::new((0..3).map(|s| {
            let p = dir.path().join(format!("src{s}.png"));
            write_test_image(&p, s)
        }).collect()).unwrap();
        write_frames(&dir.path().join("ref"), &frames).unwrap();
        write_frames(&dir.path().join("gen"), &frames).unwrap();
        let mut config = AppConfig::default();
        config.evaluate.metrics = vec![Metric::Psnr, Metric::Ssim, Metric::Lpips, Metric::Fvd];
        let args = EvaluateArgs {
            reference: dir.path().join("ref"),
            generated: dir.path().join("gen"),
            output: dir.path().join("report.json"),
            config,
        };
        let report = cmd_evaluate(&args, &Registry::with_builtin()).unwrap();
        assert_eq!(report.value(Metric::Psnr), Some(crate::metrics::PSNR_CAP_DB));
        assert_eq!(report.value(Metric::Ssim), Some(1.0));
        assert_eq!(report.value(Metric::Lpips), Some(0.0));
        assert!(report.skipped(Metric::Fvd).is_some());
        assert!(dir.path().join("report.manifest.json").exists());
    }

    #[test]
    fn robustness_sweep_and_purify() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("p.png");
        let clean = dir.path().join("c.png");
        write_test_image(&input, 1);
        write_test_image(&clean, 2);
        let args = RobustnessArgs {
            input: Some(input.clone()),
            clean: Some(clean),
            sweeps: vec!["jpeg:50,75,95".parse().unwrap()],
            purify: vec![input.clone(); 5],
            output_dir: dir.path().join("rob"),
            config: AppConfig::default(),
        };
        let out = cmd_robustness(&args, &Registry::with_builtin()).unwrap();
        assert_eq!(out.tables.len(), 1);
        assert_eq!(out.tables[0].series(crate::robustness::Series::Protected).count(), 3);
        assert!(dir.path().join("rob/sweep_jpeg.csv").exists());
        assert_eq!(read_image(out.purified.as_ref().unwrap()).unwrap(), read_image(&input).unwrap());

        let bad = RobustnessArgs { purify: vec![input; 4], input: None, ..args };
        assert!(cmd_robustness(&bad, &Registry::with_builtin()).is_err());
    }
}
