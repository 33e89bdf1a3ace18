use std::path::PathBuf;
use std::process::ExitCode;

use avfuse_cli::commands;
use avfuse_cli::config::RunConfig;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "avfuse",
    about = "Masked cross-modal contrastive pre-training on synthetic \
             audio-visual corpora, with CTC fine-tuning and probing",
    version
)]
struct Cli {
    /// Run-config TOML file; defaults to the built-in desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset (tiny, desk, full) instead of a config file.
    #[arg(long, global = true, conflicts_with = "config")]
    preset: Option<String>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus file.
    Synth {
        /// Corpus file to write (default: {out_dir}/corpus.bin).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train on a corpus; writes checkpoints and a metrics log.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from an earlier pre-training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a task head (and the backbone) on a labeled corpus.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        /// Initialize the backbone from a pre-training checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        /// Fine-tuned checkpoint (default: {out_dir}/finetune/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Exclusion strategy override: input_zero (x_to_0),
        /// embedding_zero (v_to_0), or embedding_mask (v_to_m).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Linear-probe fused embeddings against the latent states.
    Probe {
        #[arg(long)]
        corpus: PathBuf,
        /// Checkpoint holding the backbone (default: random init).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the training losses.
    Gradcheck {
        /// Model shape to check: tiny or desk.
        #[arg(long, default_value = "tiny")]
        size: String,
        /// Number of seeds; each runs one contrastive and one CTC check.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> avfuse_core::Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => match name.as_str() {
            "tiny" => RunConfig::tiny(),
            "desk" => RunConfig::desk(),
            "full" => RunConfig::full_scale(),
            other => {
                return Err(avfuse_core::Error::config(format!(
                    "unknown preset '{other}' (expected tiny, desk, or full)"
                )))
            }
        },
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> avfuse_core::Result<()> {
    match &cli.command {
        Command::Synth { out } => {
            commands::synth(&load_config(cli)?, out.as_deref())?;
        }
        Command::Pretrain { corpus, resume } => {
            commands::pretrain_cmd(&load_config(cli)?, corpus, resume.as_deref())?;
        }
        Command::Finetune { corpus, init } => {
            commands::finetune_cmd(&load_config(cli)?, corpus, init.as_deref())?;
        }
        Command::Eval {
            corpus,
            checkpoint,
            strategy,
        } => {
            let strategy = strategy
                .as_deref()
                .map(commands::parse_strategy)
                .transpose()?;
            commands::eval_cmd(&load_config(cli)?, corpus, checkpoint.as_deref(), strategy)?;
        }
        Command::Probe { corpus, checkpoint } => {
            commands::probe_cmd(&load_config(cli)?, corpus, checkpoint.as_deref())?;
        }
        Command::Gradcheck { size, seeds } => {
            commands::gradcheck_cmd(size, *seeds, cli.seed.unwrap_or(0))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
