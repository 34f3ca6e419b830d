use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use convasr::config::PipelineConfig;
use convasr::error::{PipelineError, Result};
use convasr::stages::{run_all, run_stage, write_report, Stage};

#[derive(Debug, Parser)]
#[command(name = "convasr", version, about = "Synthetic conversational speech recognition pipeline")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured work directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world.
    Gen,
    /// Train the acoustic model and its unsmoothed twin.
    TrainAm,
    /// Train the N-gram and recurrent language models.
    TrainLm,
    /// Add LM features to the N-best lists and tune rescoring weights.
    Rescore,
    /// Build confusion networks from the rescored lists.
    Cn,
    /// Two-stage system combination with greedy selection on dev.
    Combine,
    /// Score eval outputs and write error tables.
    Score,
    /// Run every enabled stage, then print the report.
    Run,
    /// Print the summary of existing stage reports.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = &cli.work_dir {
        cfg.work_dir = w.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(format!("--jobs: {}", e)))?;
    }
    let cfg = load_config(&cli)?;
    let stage = match cli.command {
        Command::Gen => Stage::Gen,
        Command::TrainAm => Stage::TrainAm,
        Command::TrainLm => Stage::TrainLm,
        Command::Rescore => Stage::Rescore,
        Command::Cn => Stage::Cn,
        Command::Combine => Stage::Combine,
        Command::Score => Stage::Score,
        Command::Run => {
            print!("{}", run_all(&cfg)?);
            return Ok(());
        }
        Command::Report => {
            print!("{}", write_report(&cfg.work_dir)?);
            return Ok(());
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
    };
    run_stage(&cfg, stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
