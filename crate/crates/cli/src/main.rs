//! Operator surface for the enhancement pipeline: corpus synthesis, stand-in
//! pretraining, the two fine-tuning stages, evaluation, single-image
//! enhancement, and recipe replay verification.

mod commands;

use anyhow::Result;
use clap::{Parser, Subcommand};
use latseg_core::config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "latseg", version, about = "Latent-space enhancement for degradation-robust promptable segmentation")]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-key config overrides, e.g. --set gle.gamma=5.0
    #[arg(long = "set", global = true, value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,

    /// Cap parallel workers (overrides the config value).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic corpus with all degradation levels.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Total image count (train/val/test split by configured fractions).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the pretrained stand-ins (segmentation model + base denoiser)
    /// and assemble the initial bundle.
    Pretrain {
        /// Corpus root produced by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: adapter-only denoiser fine-tuning on the reconstruction loss.
    TrainUnet {
        #[arg(long)]
        data: PathBuf,
        /// Bundle checkpoint from `pretrain`.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an interrupted checkpoint of this stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: decoder (or mask-token) fine-tuning on the segmentation loss.
    TrainDecoder {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint (required prerequisite).
        #[arg(long)]
        unet_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over manifest levels and write reports.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip enhancement (baseline arm).
        #[arg(long)]
        no_gle: bool,
        /// Comma-separated subset of clear,lq1,lq2,lq3.
        #[arg(long)]
        levels: Option<String>,
        /// points | box | noise-box
        #[arg(long)]
        prompt: Option<String>,
        /// train | val | test
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        density_png: bool,
    },
    /// Enhance one image and write its latent, mask, and overlay.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Point prompt "row,col" (repeatable).
        #[arg(long = "point")]
        points: Vec<String>,
        /// Box prompt "r0,c0,r1,c1".
        #[arg(long = "box")]
        box_prompt: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Decode the raw latent instead of the enhanced one.
        #[arg(long)]
        no_gle: bool,
    },
    /// Verify that stored degraded images replay bit-exactly from their
    /// recipes.
    Replay {
        /// Corpus root.
        #[arg(long)]
        data: PathBuf,
        /// Restrict to one sample id.
        #[arg(long)]
        id: Option<String>,
    },
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(format!("expected key=value, got `{s}`")),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let jobs = cli.jobs.unwrap_or(cfg.jobs);
    if jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok();
    }
    match cli.command {
        Command::Synth { out, n, seed } => commands::synth(cfg, &out, n, seed),
        Command::Pretrain { data, out } => commands::pretrain(cfg, &data, &out),
        Command::TrainUnet {
            data,
            base,
            out,
            resume,
        } => commands::train_unet(cfg, &data, &base, &out, resume.as_deref()),
        Command::TrainDecoder {
            data,
            unet_ckpt,
            out,
            resume,
        } => commands::train_decoder(cfg, &data, &unet_ckpt, &out, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            out,
            no_gle,
            levels,
            prompt,
            split,
            seed,
            density_png,
        } => commands::eval(
            cfg,
            &ckpt,
            &data,
            &out,
            no_gle,
            levels.as_deref(),
            prompt.as_deref(),
            split.as_deref(),
            seed,
            density_png,
        ),
        Command::Enhance {
            ckpt,
            image,
            points,
            box_prompt,
            out,
            no_gle,
        } => commands::enhance(cfg, &ckpt, &image, &points, box_prompt.as_deref(), &out, no_gle),
        Command::Replay { data, id } => commands::replay(&data, id.as_deref()),
    }
}
