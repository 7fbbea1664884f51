use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ocutime::pipeline::{exit_code, run_stage, PipelineConfig, Stage, EXIT_EMPTY_RESULT};

#[derive(Parser)]
#[command(name = "ocutime", version, about = "EEG ocular response-time pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Master seed; overrides OCUTIME_SEED and the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Gate windows on r > tau instead of r >= tau.
    #[arg(long)]
    strict_gate: bool,
    /// Also write band-pass SOS coefficients and an RDWT dump (preprocess).
    #[arg(long)]
    dump_coefficients: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Simulate(RunArgs),
    /// Resample, band-pass and re-reference every trial.
    Preprocess(RunArgs),
    /// Slice task segments into overlapping windows.
    Window(RunArgs),
    /// Train M0 per subject and task.
    Train(RunArgs),
    /// Train M0, M1 and M2 on identical splits.
    Ablate(RunArgs),
    /// Gate windows and compute DTW, cross-correlation and PSD metrics.
    Analyze(RunArgs),
    /// Compare subjects with the Mann-Whitney U test.
    Stats(RunArgs),
    /// Assemble the report bundle.
    Report(RunArgs),
    /// Run every stage in order.
    All(RunArgs),
    /// Print the default configuration.
    DefaultConfig,
}

fn run(args: &RunArgs, stages: &[Stage]) -> Result<bool, ocutime::Error> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    cfg.apply_seed_overrides(args.seed)?;
    if args.strict_gate {
        cfg.metrics.strict_gate = true;
    }
    if args.dump_coefficients {
        cfg.dump_rdwt = true;
        cfg.dump_filter = true;
    }
    if let Some(j) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| ocutime::Error::Config(format!("thread pool: {e}")))?;
    }
    let mut empty = false;
    for &stage in stages {
        log::info!("stage {}", stage.name());
        let outcome = run_stage(&cfg, stage)?;
        if outcome.empty {
            log::warn!("{}: no usable results", stage.name());
            empty = true;
        }
    }
    Ok(empty)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (args, stages): (&RunArgs, Vec<Stage>) = match &cli.command {
        Command::Simulate(a) => (a, vec![Stage::Simulate]),
        Command::Preprocess(a) => (a, vec![Stage::Preprocess]),
        Command::Window(a) => (a, vec![Stage::Window]),
        Command::Train(a) => (a, vec![Stage::Train]),
        Command::Ablate(a) => (a, vec![Stage::Ablate]),
        Command::Analyze(a) => (a, vec![Stage::Analyze]),
        Command::Stats(a) => (a, vec![Stage::Stats]),
        Command::Report(a) => (a, vec![Stage::Report]),
        Command::All(a) => {
            let mut st = Stage::ALL.to_vec();
            let cfg_external = PipelineConfig::load(&a.config).map(|c| c.paths.input_dir.is_some()).unwrap_or(false);
            if cfg_external {
                st.retain(|s| *s != Stage::Simulate);
            }
            (a, st)
        }
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml());
            return ExitCode::SUCCESS;
        }
    };
    match run(args, &stages) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(EXIT_EMPTY_RESULT as u8),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
