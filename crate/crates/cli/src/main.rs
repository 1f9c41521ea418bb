use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crcrisk::commands::{self, ExplainKind};
use crcrisk::config::RunConfig;
use crcrisk::Result;

/// Desk-scale 5-year colorectal cancer risk pipeline on synthetic cohorts.
#[derive(Parser)]
#[command(name = "crcrisk", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArg {
    /// Run directory for all outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory.
    Synth {
        #[command(flatten)]
        out: OutArg,
    },
    /// Masked pretraining of the region transformer.
    Pretrain {
        /// Cohort directory (from `synth`).
        #[arg(long)]
        cohort: PathBuf,
        #[command(flatten)]
        out: OutArg,
    },
    /// Fine-tune for 5-year risk, directly or guided by intermediates.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// direct | guided-freeze | guided-full (overrides config).
        #[arg(long)]
        mode: Option<String>,
        /// Stage-1 target spec for guided modes (overrides config).
        #[arg(long)]
        target: Option<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Repeated-split evaluation of one or more pipelines.
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        /// Pipeline name, repeatable (e.g. `wsi`, `colonoscopy+wsi+clinical`).
        #[arg(long = "pipeline")]
        pipelines: Vec<String>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Attention overlays, attention differences, or Shapley tables.
    Explain {
        #[arg(long)]
        cohort: PathBuf,
        /// attention | attention-diff | shapley
        #[arg(long)]
        kind: String,
        /// Checkpoint under explanation.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pretrained baseline checkpoint (attention-diff only).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Print the summary of an existing evaluation run directory.
    Report {
        /// Directory written by `eval`.
        #[arg(long)]
        eval: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth { out } => commands::cmd_synth(&cfg, &out.out),
        Command::Pretrain { cohort, out } => commands::cmd_pretrain(&cfg, &cohort, &out.out),
        Command::Train { cohort, checkpoint, mode, target, out } => {
            if let Some(mode) = mode {
                cfg.train.mode = mode;
            }
            if let Some(target) = target {
                cfg.train.target = target;
            }
            commands::cmd_train(&cfg, &cohort, &checkpoint, &out.out)
        }
        Command::Eval { cohort, pipelines, out } => {
            let summary = commands::cmd_eval(&cfg, &cohort, &pipelines, &out.out)?;
            print!("{summary}");
            Ok(())
        }
        Command::Explain { cohort, kind, checkpoint, baseline, out } => {
            let kind = ExplainKind::parse(&kind)?;
            commands::cmd_explain(&cfg, &cohort, kind, &checkpoint, baseline.as_deref(), &out.out)
        }
        Command::Report { eval } => {
            let summary = commands::cmd_report(&eval)?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Verbosity comes from the environment only.
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CRCRISK_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
