use std::path::PathBuf;
use std::process::ExitCode;

use animguard::commands::{cmd_evaluate, cmd_protect, cmd_replay, cmd_robustness, EvaluateArgs, ProtectArgs, RobustnessArgs};
use animguard::config::{AppConfig, Fraction};
use animguard::extractors::Registry;
use animguard::robustness::SweepAxis;
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

/// Protect still images against image-to-video animation.
#[derive(Parser, Debug)]
#[command(name = "animguard", version)]
struct Cli {
    /// TOML config file; ANIMGUARD_<SECTION>_<KEY> variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute a protective perturbation and write the protected PNG.
    Protect(ProtectCmd),
    /// Score generated frames against reference frames.
    Evaluate(EvaluateCmd),
    /// Countermeasure sweeps and interpolate-average purification.
    Robustness(RobustnessCmd),
}

#[derive(Args, Debug)]
struct ProtectCmd {
    /// Image to protect (defaults to the recorded input with --replay).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Protected PNG; the manifest and trace are written next to it.
    #[arg(long)]
    output: PathBuf,
    /// Re-run a recorded manifest instead of the config.
    #[arg(long, conflicts_with_all = ["seed", "budget", "iterations", "step_size", "decay", "frames", "lpips_budget"])]
    replay: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// L-infinity budget, e.g. 16/255 or 0.0627.
    #[arg(long)]
    budget: Option<Fraction>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Sign step size, e.g. 2/255.
    #[arg(long)]
    step_size: Option<Fraction>,
    /// Momentum decay.
    #[arg(long)]
    decay: Option<f64>,
    /// Noisy latent frames per iteration.
    #[arg(long)]
    frames: Option<usize>,
    /// Perceptual distance allowed before the penalty applies.
    #[arg(long)]
    lpips_budget: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateCmd {
    /// Reference image or frame directory.
    #[arg(long)]
    reference: PathBuf,
    /// Generated frame directory.
    #[arg(long)]
    generated: PathBuf,
    /// Report JSON.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated metrics or `all`.
    #[arg(long)]
    metrics: Option<String>,
}

#[derive(Args, Debug)]
struct RobustnessCmd {
    /// Protected image to sweep.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Unprotected original for the comparison series.
    #[arg(long)]
    clean: Option<PathBuf>,
    /// Sweep axis such as `jpeg:50,75,95` or `blur` (repeatable).
    #[arg(long)]
    sweep: Vec<SweepAxis>,
    /// Five images to purify.
    #[arg(long, num_args = 1..)]
    purify: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    /// Comma-separated downstream metrics or `all`.
    #[arg(long)]
    metrics: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn apply_protect_flags(cfg: &mut AppConfig, cmd: &ProtectCmd) {
    let p = &mut cfg.protect;
    if let Some(v) = cmd.seed {
        p.seed = v;
    }
    if let Some(v) = cmd.budget {
        p.budget = v;
    }
    if let Some(v) = cmd.iterations {
        p.iterations = v;
    }
    if let Some(v) = cmd.step_size {
        p.step_size = v;
    }
    if let Some(v) = cmd.decay {
        p.decay = v;
    }
    if let Some(v) = cmd.frames {
        p.frames = v;
    }
    if let Some(v) = cmd.lpips_budget {
        p.lpips_budget = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let registry = Registry::with_builtin();
    let mut config = AppConfig::load(cli.config.as_deref()).context("loading configuration")?;
    match cli.command {
        Command::Protect(cmd) => {
            let out = if let Some(manifest) = &cmd.replay {
                cmd_replay(manifest, cmd.input.as_deref(), &cmd.output, &registry)?
            } else {
                let Some(input) = cmd.input.clone() else { bail!("--input is required unless --replay is given") };
                apply_protect_flags(&mut config, &cmd);
                cmd_protect(&ProtectArgs { input, output: cmd.output.clone(), config, manifest: None, trace: None }, &registry)?
            };
            println!(
                "wrote {} (max |delta| {:.5}, {} iterations)\nmanifest {}\ntrace {}",
                out.output.display(),
                out.linf,
                out.trace.len(),
                out.manifest.display(),
                out.trace_path.display()
            );
        }
        Command::Evaluate(cmd) => {
            if let Some(m) = &cmd.metrics {
                config.set_metrics(m)?;
            }
            let report = cmd_evaluate(
                &EvaluateArgs { reference: cmd.reference, generated: cmd.generated, output: cmd.output.clone(), config },
                &registry,
            )?;
            for (name, entry) in &report.metrics {
                match (&entry.value, &entry.skipped) {
                    (Some(v), _) => println!("{:<8} {v:.6}", name.as_str()),
                    (None, Some(reason)) => println!("{:<8} skipped: {reason}", name.as_str()),
                    _ => {}
                }
            }
            println!("report {}", cmd.output.display());
        }
        Command::Robustness(cmd) => {
            if let Some(m) = &cmd.metrics {
                config.robustness.metrics = animguard::metrics::parse_metric_list(m)?;
            }
            if let Some(s) = cmd.seed {
                config.robustness.seed = s;
            }
            let out = cmd_robustness(
                &RobustnessArgs {
                    input: cmd.input,
                    clean: cmd.clean,
                    sweeps: cmd.sweep,
                    purify: cmd.purify,
                    output_dir: cmd.output.clone(),
                    config,
                },
                &registry,
            )?;
            for t in &out.tables {
                println!("sweep {}: {} rows", t.kind.as_str(), t.series(animguard::robustness::Series::Protected).count());
            }
            if let Some(p) = out.purified {
                println!("purified {}", p.display());
            }
            println!("output {}", cmd.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
