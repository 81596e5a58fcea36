use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use lid_core::pipeline::{run_all, run_stage, RunConfig, Stage, StageStatus};
use lid_core::LidError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    SynthCorpus,
    Features,
    TrainUbm,
    TrainDnn,
    TrainIvector,
    ExtractIvectors,
    TrainClassifier,
    Score,
    Evaluate,
    /// Every stage the configured pipeline needs, in order.
    All,
}

impl StageArg {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            StageArg::SynthCorpus => Stage::SynthCorpus,
            StageArg::Features => Stage::Features,
            StageArg::TrainUbm => Stage::TrainUbm,
            StageArg::TrainDnn => Stage::TrainDnn,
            StageArg::TrainIvector => Stage::TrainIvector,
            StageArg::ExtractIvectors => Stage::ExtractIvectors,
            StageArg::TrainClassifier => Stage::TrainClassifier,
            StageArg::Score => Stage::Score,
            StageArg::Evaluate => Stage::Evaluate,
            StageArg::All => return None,
        })
    }
}

/// Spoken language recognition with GMM or DNN posteriors and i-vectors.
#[derive(Debug, Parser)]
#[command(name = "lid", version)]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    stage: StageArg,
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Overwrite outputs even when the stage inputs changed.
    #[arg(long)]
    force: bool,
    /// Reseed every model component.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> Result<(), LidError> {
    if cli.jobs == 0 {
        return Err(LidError::InvalidConfig("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(|e| LidError::InvalidConfig(format!("cannot start {} worker threads: {e}", cli.jobs)))?;
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let results = match cli.stage.stage() {
        Some(stage) => vec![(stage, run_stage(stage, &cfg, cli.force)?)],
        None => run_all(&cfg, cli.force)?,
    };
    for (stage, status) in results {
        match status {
            StageStatus::Ran => log::info!("{stage}: completed"),
            StageStatus::UpToDate => log::info!("{stage}: already up to date"),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
