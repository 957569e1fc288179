//! `polypforge`: one binary driving every pipeline stage from a JSON config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing
//! upstream artifact.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polypforge_core::filter::Alpha;

use crate::commands::Context;
use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "polypforge", version, about = "Confidence-filtered GAN augmentation pipeline")]
struct Cli {
    /// Pipeline config (JSON). Flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic stage of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output root; falls back to `paths.output_root`, then `POLYPFORGE_OUT`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset manifest (overrides `paths.manifest`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural toy dataset.
    Toygen {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a classifier on the manifest's train split.
    TrainClassifier,
    /// Rank target-class tiles and keep the top alpha fraction.
    Filter {
        /// Fraction in (0, 1], as a decimal or `1/k`.
        #[arg(long)]
        alpha: Option<String>,
        /// Scorer checkpoint; without it the ranking is cross-fitted.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Train the cycle-consistent translator.
    TrainGan {
        /// Filtered subset CSV restricting the target domain.
        #[arg(long)]
        subset: Option<PathBuf>,
    },
    /// Translate the manifest's source-class tiles with a checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Target-class fraction over a grid of alphas.
    Ablation {
        /// Comma-separated alphas, e.g. `1,0.5,1/4`.
        #[arg(long)]
        alphas: Option<String>,
        /// Judge checkpoint; without it a judge is trained on the val split.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Classifier AUC per augmentation arm and seed.
    Experiment,
    /// Run the blinded review service until interrupted.
    Serve {
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn output_root(cli: &Cli, config: &PipelineConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| config.paths.output_root.clone())
        .or_else(|| std::env::var_os("POLYPFORGE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn apply_flags(cli: &Cli, config: &mut PipelineConfig) -> Result<()> {
    if let Some(m) = &cli.manifest {
        config.paths.manifest = Some(m.clone());
    }
    if let Some(s) = cli.seed {
        config.classifier.seed = s;
        config.gan.seed = s;
        config.dcgan.seed = s;
        config.experiment.seeds = vec![s];
    }
    match &cli.command {
        Command::Filter { alpha, classifier } => {
            if let Some(a) = alpha {
                let parsed: Alpha =
                    a.parse().map_err(|_| CliError::config("filter.alpha", format!("`{a}` is outside (0, 1]")))?;
                config.filter.alpha = parsed.value();
            }
            if let Some(c) = classifier {
                config.paths.classifier = Some(c.clone());
            }
        }
        Command::TrainGan { subset: Some(s) } => config.paths.subset = Some(s.clone()),
        Command::Translate { checkpoint: Some(c) } => config.paths.checkpoint = Some(c.clone()),
        Command::Ablation { alphas, classifier } => {
            if let Some(a) = alphas {
                config.experiment.alphas = commands::parse_alpha_list(a)?;
            }
            if let Some(c) = classifier {
                config.paths.classifier = Some(c.clone());
            }
        }
        Command::Serve { bind, port } => {
            if let Some(b) = bind {
                config.service.bind = b.clone();
            }
            if let Some(p) = port {
                config.service.port = *p;
            }
        }
        _ => {}
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::config("jobs", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    apply_flags(cli, &mut config)?;
    let out = output_root(cli, &config);
    if let Command::Toygen { spec } = &cli.command {
        return commands::toygen(&config, spec.as_deref(), cli.seed, &out);
    }
    let ctx = Context::new(config, out)?;
    match &cli.command {
        Command::Toygen { .. } => unreachable!("handled above"),
        Command::TrainClassifier => commands::train_classifier_cmd(&ctx),
        Command::Filter { .. } => commands::filter_cmd(&ctx),
        Command::TrainGan { .. } => commands::train_gan_cmd(&ctx),
        Command::Translate { .. } => commands::translate_cmd(&ctx),
        Command::Ablation { .. } => commands::ablation_cmd(&ctx),
        Command::Experiment => commands::experiment_cmd(&ctx),
        Command::Serve { .. } => commands::serve_cmd(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
