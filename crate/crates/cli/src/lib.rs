//! Command-line front end: data generation, both training stages, few-shot
//! adaptation, evaluation, ablation tables, gradient checks, parameter and
//! FLOP accounting, and Grad-CAM export.

pub mod ablation;
pub mod checks;
pub mod commands;
pub mod config;
pub mod data;
pub mod pipeline;

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use m3net_core::attribution::{GradCamConfig, Readout};
use m3net_core::Error;

use crate::ablation::AblationKind;
use crate::commands::Ctx;
use crate::config::RunConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

/// A verification that ran to completion and found a violation.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

#[derive(Debug, Parser)]
#[command(name = "m3net", version, about = "Nested multi-scale 3D nodule classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Run directory for inputs and outputs.
    #[arg(long, global = true, default_value = "m3net-run")]
    pub out: PathBuf,

    /// Model checkpoint to start from (defaults depend on the command).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic source set into OUT/data.
    Synth,
    /// Stratified train/val/test split of OUT/data/manifest.csv.
    Split,
    /// Per-scale supervised pretraining.
    Train1,
    /// Alignment-regularised fusion training.
    Train2,
    /// Few-shot fine-tuning on the shifted target set with source replay.
    Fewshot,
    /// Metrics of a checkpoint on the test split, or of a predictions file.
    Eval {
        /// CSV with columns source_id,label,score to score instead of a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// One ablation table.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Training seeds SEED, SEED+1, ...; the data always uses SEED.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Finite-difference gradient checks of every loss term.
    Gradcheck {
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Parameter and FLOP counts.
    Params,
    /// Grad-CAM saliency volumes.
    Gradcam {
        /// Explain this source id instead of the whole test split.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, default_value_t = m3net_core::attribution::DEFAULT_SCALE)]
        scale: usize,
        /// Encoder stage; the last one when omitted.
        #[arg(long)]
        stage: Option<usize>,
        /// Class to explain; the predicted one when omitted.
        #[arg(long)]
        target: Option<usize>,
        /// Explain the fused classifier instead of the per-scale head.
        #[arg(long)]
        fused: bool,
    },
}

pub fn load_config(path: Option<&PathBuf>) -> m3net_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let ctx = Ctx {
        cfg: load_config(cli.config.as_ref())?,
        seed: cli.seed,
        out: cli.out.clone(),
        checkpoint: cli.checkpoint.clone(),
    };
    ctx.echo()?;
    match &cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Split => commands::split(&ctx),
        Command::Train1 => commands::train1(&ctx),
        Command::Train2 => commands::train2(&ctx),
        Command::Fewshot => commands::fewshot(&ctx),
        Command::Eval { predictions } => commands::eval(&ctx, predictions.as_deref()),
        Command::Ablate { kind, seeds } => commands::ablate(&ctx, *kind, *seeds),
        Command::Gradcheck { seeds } => commands::gradcheck(&ctx, *seeds),
        Command::Params => commands::params(&ctx),
        Command::Gradcam {
            sample,
            scale,
            stage,
            target,
            fused,
        } => {
            let cam = GradCamConfig {
                scale: *scale,
                stage: *stage,
                target: *target,
                readout: if *fused { Readout::Fused } else { Readout::Head },
            };
            commands::gradcam_cmd(&ctx, &cam, sample.as_deref())
        }
    }
}

/// Exit status for a failed command: configuration problems, unreadable or
/// inconsistent data, and failed checks each get their own code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    let Some(core) = err.chain().find_map(|e| e.downcast_ref::<Error>()) else {
        return if err.chain().any(|e| e.is::<std::io::Error>()) {
            EXIT_DATA
        } else {
            EXIT_OTHER
        };
    };
    match core {
        Error::Config(_) => EXIT_CONFIG,
        Error::NonDeterministic { .. } => EXIT_CHECK,
        Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::InvalidVolume(_)
        | Error::Manifest(_)
        | Error::EmptyScores
        | Error::ScoreOutOfRange(_)
        | Error::TooFewToStratify { .. }
        | Error::Checkpoint(_)
        | Error::Leakage(_)
        | Error::Metrics(_) => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}
