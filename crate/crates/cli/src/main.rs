//! `latentplay`: runs one pipeline stage per invocation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentplay::config::RunConfig;
use latentplay::pipeline::{run_stage, PipelineError, Stage, StageReport, DEFAULT_OUT, OUT_ENV};
use latentplay::report::report_stage;

#[derive(Parser, Debug)]
#[command(name = "latentplay", version, about = "Closed-loop latent rollout training on a synthetic driving world")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set rollout.horizon=4`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Master seed (shorthand for `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads inside a stage (shorthand for `--set workers=N`).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output root holding run directories.
    #[arg(long, global = true, env = OUT_ENV, default_value = DEFAULT_OUT)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and eval clip datasets.
    GenData,
    /// Pretrain the encoder and state heads on logged clips.
    Pretrain,
    /// Rollout supervised fine-tuning from a pretrain checkpoint.
    Sft,
    /// GRPO fine-tuning from an SFT checkpoint.
    Rl,
    /// Closed-loop evaluation of a checkpoint.
    Eval,
    /// Train and evaluate every ablation row from a pretrain checkpoint.
    Ablate,
    /// Tables and charts over run directories (default: the output root).
    Report { dirs: Vec<PathBuf> },
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = cli.workers {
        overrides.push(format!("workers={w}"));
    }
    Ok(RunConfig::resolve(cli.config.as_deref(), &overrides)?)
}

fn run(cli: &Cli) -> Result<Option<StageReport>, PipelineError> {
    let cfg = resolve(cli)?;
    let stage = match &cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(None);
        }
        Command::Report { dirs } => return report_stage(&cfg, &cli.out, dirs).map(Some),
        Command::GenData => Stage::GenData,
        Command::Pretrain => Stage::Pretrain,
        Command::Sft => Stage::Sft,
        Command::Rl => Stage::Rl,
        Command::Eval => Stage::Eval,
        Command::Ablate => Stage::Ablate,
    };
    run_stage(stage, &cfg, &cli.out).map(Some)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Some(report)) => {
            println!("{}", report.dir.display());
            for l in &report.lines {
                println!("  {l}");
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
