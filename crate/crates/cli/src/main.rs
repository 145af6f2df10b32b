//! `apd`: synthetic data generation, training, evaluation, prediction and
//! heatmap visualization for the change detector.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use apd_core::config::RunConfig;
use apd_core::data::Split;
use clap::{Args, Parser, Subcommand};

use commands::{CliError, ModelSource};

#[derive(Debug, Parser)]
#[command(name = "apd", version, about = "Bitemporal change detection with alignment, perturbation and decoupled decoders")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set optim.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset in the A/B/label/list layout plus manifest.json.
    GenData(GenDataArgs),
    /// Train a model, writing the log and best/last checkpoints into the run directory.
    Train(TrainArgs),
    /// Score a checkpoint (or saved masks) on a dataset split.
    Eval(EvalArgs),
    /// Predict a change mask for one image pair.
    Predict(PredictArgs),
    /// Write per-stage mask and difference heatmaps plus the fused map for one pair.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output root; defaults to `paths.data`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root; defaults to `paths.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to `paths.run_dir`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from a checkpoint, using its configuration (overrides still apply).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CheckpointArg {
    /// Model checkpoint. Its stored model configuration is used unless
    /// `--config` or a `model.*` override is given.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Model checkpoint; not needed with `--predictions`.
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Score saved 0/255 masks `<dir>/<id>.png` instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Dataset root; defaults to `paths.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report path; the report is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each predicted mask to `<dir>/<id>.png`.
    #[arg(long)]
    save_masks: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PairArgs {
    /// Image at the earlier time.
    #[arg(long = "a")]
    a: PathBuf,
    /// Image at the later time.
    #[arg(long = "b")]
    b: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    #[command(flatten)]
    pair: PairArgs,
    /// Output mask (8-bit, 0 or 255).
    #[arg(long)]
    out: PathBuf,
    /// Optional 8-bit probability map.
    #[arg(long)]
    prob_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    #[command(flatten)]
    pair: PairArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

fn resolve_config(cli: &Cli) -> Result<(RunConfig, ModelSource), CliError> {
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let config = base.with_overrides(&cli.overrides)?;
    let source = if cli.config.is_some() || cli.overrides.iter().any(|o| o.trim_start().starts_with("model.")) {
        ModelSource::Config
    } else {
        ModelSource::Checkpoint
    };
    Ok((config, source))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (mut config, source) = resolve_config(&cli)?;
    match cli.command {
        Command::GenData(a) => {
            let g = &mut config.gen_data;
            g.spec.size = a.size.unwrap_or(g.spec.size);
            g.spec.seed = a.seed.unwrap_or(g.spec.seed);
            g.train = a.train.unwrap_or(g.train);
            g.val = a.val.unwrap_or(g.val);
            g.test = a.test.unwrap_or(g.test);
            let out = a.out.unwrap_or_else(|| config.paths.data.clone());
            commands::gen_data(&config, &out)
        }
        Command::Train(a) => {
            if let Some(d) = a.data {
                config.paths.data = d;
            }
            if let Some(r) = a.run_dir {
                config.paths.run_dir = r;
            }
            commands::train(config, &cli.overrides, a.resume.as_deref())
        }
        Command::Eval(a) => {
            let data = a.data.unwrap_or_else(|| config.paths.data.clone());
            let target = match (&a.predictions, &a.checkpoint) {
                (Some(dir), _) => commands::EvalTarget::Masks(dir),
                (None, Some(ckpt)) => commands::EvalTarget::Model(ckpt, source),
                (None, None) => unreachable!("clap requires one of them"),
            };
            commands::eval(&config, target, &data, a.split, a.out.as_deref(), a.save_masks.as_deref())
        }
        Command::Predict(a) => commands::predict(
            &config,
            &a.ckpt.checkpoint,
            source,
            &a.pair.a,
            &a.pair.b,
            &a.out,
            a.prob_out.as_deref(),
        ),
        Command::Visualize(a) => {
            commands::visualize(&config, &a.ckpt.checkpoint, source, &a.pair.a, &a.pair.b, &a.out_dir)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
