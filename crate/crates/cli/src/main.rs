//! `gdnet`: synthesize, degrade, train, infer and evaluate from the shell.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gdnet_core::imaging::DegradationMode;
use gdnet_core::model::Preset;
use log::{error, info};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "gdnet", version, about = "Optics-guided thermal image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate procedural optical/thermal pairs and a manifest.
    Synth(Flags),
    /// Tag records normal/fog/lowlight 1:1:1 and degrade their optical images.
    Degrade(Flags),
    /// Run training stages (1, 2nc, 2li, 2fo, 3 or all).
    Train(Flags),
    /// Write super-resolved thermal images for every manifest record.
    Infer(Flags),
    /// Score SR images against the HR thermal planes.
    Eval(Flags),
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    match s {
        "paper" => Ok(Preset::Paper),
        "tiny" => Ok(Preset::Tiny),
        other => Err(format!("unknown preset {other:?} (expected paper or tiny)")),
    }
}

/// Every config key as a flag; flags override the `--config` file.
#[derive(Args, Debug, Default)]
struct Flags {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// Thermal degradation: BI or BD.
    #[arg(long)]
    mode: Option<DegradationMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model size: paper or tiny.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// LR patch side.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long)]
    halve_every: Option<usize>,
    #[arg(long)]
    stage3_train_head: Option<bool>,
    /// Inference guidance: full, stage1, normal, fog or lowlight.
    #[arg(long)]
    guidance: Option<String>,
    /// Number of pairs to synthesize.
    #[arg(long)]
    n: Option<usize>,
    /// Side of synthesized HR images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sr: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

impl Flags {
    fn resolve(self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            scale: self.scale,
            mode: self.mode,
            seed: self.seed,
            preset: self.preset,
            stage: self.stage,
            steps: self.steps,
            batch_size: self.batch_size,
            patch: self.patch,
            base_lr: self.base_lr,
            halve_every: self.halve_every,
            stage3_train_head: self.stage3_train_head,
            guidance: self.guidance,
            n: self.n,
            size: self.size,
            manifest: self.manifest,
            checkpoint: self.checkpoint,
            out: self.out,
            sr: self.sr,
            report: self.report,
            loss_log: self.loss_log,
        };
        let cfg = base.merged(&flags);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Cap rayon workers at `GDNET_THREADS` when set.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GDNET_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("GDNET_THREADS={v:?} is not a positive integer"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let (name, flags, command): (&str, Flags, fn(&RunConfig) -> Result<()>) = match cli.command {
        Command::Synth(f) => ("synth", f, commands::synth),
        Command::Degrade(f) => ("degrade", f, commands::degrade),
        Command::Train(f) => ("train", f, commands::train),
        Command::Infer(f) => ("infer", f, commands::infer),
        Command::Eval(f) => ("eval", f, commands::eval),
    };
    let cfg = flags.resolve()?;
    info!("{name} config: {}", serde_json::to_string(&cfg)?);
    command(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
