use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use voxfuse::harness::{run_case_study, run_stage, ExperimentConfig, RunDir, Stage};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Prepare,
    Train,
    Generate,
    Evaluate,
    Report,
    /// All stages in order.
    Run,
}

/// Super-resolve a low-res segmented volume using high-res 2D images.
#[derive(Parser, Debug)]
#[command(name = "voxfuse", version)]
struct Cli {
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to the configured `out` or `runs/<name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("[{}] {e}", Stage::Config);
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    let run = RunDir::new(cli.out.unwrap_or_else(|| cfg.out_dir()));
    let result = match cli.command {
        Command::Prepare => run_stage(&cfg, &run, Stage::Prepare),
        Command::Train => run_stage(&cfg, &run, Stage::Train),
        Command::Generate => run_stage(&cfg, &run, Stage::Generate),
        Command::Evaluate => run_stage(&cfg, &run, Stage::Evaluate),
        Command::Report => run_stage(&cfg, &run, Stage::Report),
        Command::Run => run_case_study(&cfg, &run).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
