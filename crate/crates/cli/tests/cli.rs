use std::path::Path;

use animguard::config::RunManifest;
use animguard::extractors::build_toy_stack;
use animguard::io::{read_frames, read_image, write_frames, write_png};
use animguard::metrics::{evaluate, Embedders, Metric, MetricReport};
use animguard::tensor::{FrameSequence, ImageTensor, Shape, Tensor3};
use assert_cmd::Command;
use predicates::str::contains;

fn image(seed: u64) -> ImageTensor {
    ImageTensor::from_tensor(Tensor3::from_fn(Shape::new(3, 16, 16), |c, y, x| {
        (((c as u64 * 37 + y as u64 * 11 + x as u64 * 5 + seed * 13) % 180) as f64 + 30.0) / 255.0
    }))
    .unwrap()
}

fn animguard() -> Command {
    let mut cmd = Command::cargo_bin("animguard").unwrap();
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("ANIMGUARD_")) {
        cmd.env_remove(k);
    }
    cmd
}

fn protect(dir: &Path, out: &str, extra: &[&str]) -> assert_cmd::assert::Assert {
    animguard()
        .args(["protect", "--input"])
        .arg(dir.join("in.png"))
        .arg("--output")
        .arg(dir.join(out))
        .args(["--iterations", "5", "--frames", "2"])
        .args(extra)
        .assert()
}

#[test]
fn protect_defaults_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("in.png"), &image(0)).unwrap();
    animguard()
        .args(["protect", "--input"])
        .arg(dir.path().join("in.png"))
        .arg("--output")
        .arg(dir.path().join("p.png"))
        .env("ANIMGUARD_PROTECT_ITERATIONS", "2")
        .assert()
        .success();
    let m = RunManifest::read(&dir.path().join("p.manifest.json")).unwrap();
    let p = m.config.protection();
    assert_eq!(p.eta, 16.0 / 255.0);
    assert_eq!(p.iterations, 2);
    assert_eq!(p.decay, 0.5);
    assert_eq!(p.frames, 5);
    assert_eq!(p.weights.zeta, 0.1);
    assert_eq!(
        [p.weights.lambda_vae, p.weights.lambda_clip, p.weights.lambda_ref, p.weights.lambda_frame, p.weights.lambda_lpips],
        [10.0, 10.0, 100.0, 1.0, 10.0]
    );
}

#[test]
fn budget_override_recorded_and_respected() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(1);
    write_png(&dir.path().join("in.png"), &x).unwrap();
    protect(dir.path(), "p.png", &["--budget", "32/255"]).success();
    let m = RunManifest::read(&dir.path().join("p.manifest.json")).unwrap();
    assert_eq!(m.config.protection().eta, 32.0 / 255.0);
    let out = read_image(&dir.path().join("p.png")).unwrap();
    let linf = out.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(linf <= 32.0 / 255.0 + 1e-12);
    let trace = std::fs::read_to_string(dir.path().join("p.trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    assert!(trace.lines().last().unwrap().contains(&m.config_hash));
}

#[test]
fn protect_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("in.png"), &image(2)).unwrap();
    protect(dir.path(), "a.png", &["--seed", "9"]).success();
    protect(dir.path(), "b.png", &["--seed", "9"]).success();
    animguard()
        .args(["protect", "--replay"])
        .arg(dir.path().join("a.manifest.json"))
        .arg("--output")
        .arg(dir.path().join("c.png"))
        .assert()
        .success();
    let a = std::fs::read(dir.path().join("a.png")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.png")).unwrap());
    assert_eq!(a, std::fs::read(dir.path().join("c.png")).unwrap());
}

#[test]
fn protect_failures_exit_nonzero_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    protect(dir.path(), "p.png", &[]).failure().stderr(contains("error"));
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);

    write_png(&dir.path().join("in.png"), &image(3)).unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[extractors]\npreset = \"nonexistent\"\n").unwrap();
    protect(dir.path(), "out/p.png", &["--config", dir.path().join("bad.toml").to_str().unwrap()]).failure();
    assert!(!dir.path().join("out").exists());

    std::fs::write(dir.path().join("typo.toml"), "[protect]\nbudgett = 0.1\n").unwrap();
    protect(dir.path(), "out/p.png", &["--config", dir.path().join("typo.toml").to_str().unwrap()]).failure();
    assert!(!dir.path().join("out").exists());
}

#[test]
fn evaluate_copy_and_library_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let frames = FrameSequence::new((0..4).map(image).collect()).unwrap();
    let other = FrameSequence::new((4..8).map(image).collect()).unwrap();
    write_frames(&dir.path().join("ref"), &frames).unwrap();
    write_frames(&dir.path().join("copy"), &frames).unwrap();
    write_frames(&dir.path().join("gen"), &other).unwrap();

    let run = |gen: &str, metrics: &str, report: &str| {
        animguard()
            .arg("evaluate")
            .arg("--reference")
            .arg(dir.path().join("ref"))
            .arg("--generated")
            .arg(dir.path().join(gen))
            .arg("--output")
            .arg(dir.path().join(report))
            .args(["--metrics", metrics])
            .assert()
            .success();
        let text = std::fs::read_to_string(dir.path().join(report)).unwrap();
        serde_json::from_str::<MetricReport>(&text).unwrap()
    };

    let copy = run("copy", "psnr,ssim,lpips,fvd", "copy.json");
    assert_eq!(copy.value(Metric::Psnr), Some(100.0));
    assert_eq!(copy.value(Metric::Ssim), Some(1.0));
    assert_eq!(copy.value(Metric::Lpips), Some(0.0));
    assert!(copy.skipped(Metric::Fvd).is_some());

    let cli = run("gen", "all", "gen.json");
    let bundle = build_toy_stack(0, 4).unwrap();
    let lib = evaluate(
        &read_frames(&dir.path().join("ref")).unwrap(),
        &read_frames(&dir.path().join("gen")).unwrap(),
        &Embedders::toy(bundle.semantic.clone()),
        Some(bundle.perceptual.as_ref()),
        &animguard::metrics::parse_metric_list("all").unwrap(),
    )
    .unwrap();
    assert_eq!(cli, lib);
}

#[test]
fn evaluate_missing_video_embedder_skips() {
    let dir = tempfile::tempdir().unwrap();
    let frames = FrameSequence::new((0..40).map(|s| image(s % 7)).collect()).unwrap();
    write_frames(&dir.path().join("ref"), &frames).unwrap();
    write_frames(&dir.path().join("gen"), &frames).unwrap();
    animguard()
        .arg("evaluate")
        .arg("--reference")
        .arg(dir.path().join("ref"))
        .arg("--generated")
        .arg(dir.path().join("gen"))
        .arg("--output")
        .arg(dir.path().join("r.json"))
        .args(["--metrics", "fvd"])
        .env("ANIMGUARD_EVALUATE_EMBEDDERS", "\"toy-image\"")
        .assert()
        .success()
        .stdout(contains("skipped"));
}

#[test]
fn evaluate_empty_generated_fails() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("ref.png"), &image(0)).unwrap();
    std::fs::create_dir(dir.path().join("gen")).unwrap();
    animguard()
        .arg("evaluate")
        .arg("--reference")
        .arg(dir.path().join("ref.png"))
        .arg("--generated")
        .arg(dir.path().join("gen"))
        .arg("--output")
        .arg(dir.path().join("r.json"))
        .assert()
        .failure();
}

#[test]
fn robustness_sweep_rows_and_purify() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(5);
    write_png(&dir.path().join("p.png"), &x).unwrap();
    animguard()
        .arg("robustness")
        .arg("--input")
        .arg(dir.path().join("p.png"))
        .args(["--sweep", "jpeg:50,75,95", "--metrics", "lpips,psnr", "--purify"])
        .args(std::iter::repeat_n(dir.path().join("p.png"), 5))
        .arg("--output")
        .arg(dir.path().join("out"))
        .assert()
        .success()
        .stdout(contains("sweep jpeg: 3 rows"));
    let csv = std::fs::read_to_string(dir.path().join("out/sweep_jpeg.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("protected,jpeg")).count(), 3 * 2);
    assert_eq!(read_image(&dir.path().join("out/purified.png")).unwrap(), x);

    animguard()
        .arg("robustness")
        .arg("--purify")
        .args(std::iter::repeat_n(dir.path().join("p.png"), 4))
        .arg("--output")
        .arg(dir.path().join("out2"))
        .assert()
        .failure();
}
