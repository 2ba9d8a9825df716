use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpcert::config::RunConfig;
use fpcert::fixed_point::NonFinitePolicy;
use fpcert::pipeline::{Pipeline, RunOptions, Stage};
use fpcert::Error;

#[derive(Parser, Debug)]
#[command(name = "fpcert", version, about = "Probabilistic performance certificates for fixed-point optimizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; falls back to FPCERT_THREADS, then all cores.
    #[arg(long, global = true, env = "FPCERT_THREADS")]
    threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Abort on non-finite rollouts instead of counting them as failures.
    #[arg(long, global = true)]
    strict_finite: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Sample problem instances.
    Gen,
    /// Run a classical optimizer and store the traces.
    Run,
    /// Classical sample-convergence certificates from stored traces.
    Certify,
    /// PAC-Bayes training of a learned optimizer.
    Train,
    /// Monte Carlo calibration of trained weights.
    Calibrate,
    /// Quantile bounds from certificates.csv.
    Quantiles,
    /// Confidence audit and plot data.
    Report,
    /// Every stage in order.
    All,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Gen => Stage::Gen,
            Command::Run => Stage::Run,
            Command::Certify => Stage::Certify,
            Command::Train => Stage::Train,
            Command::Calibrate => Stage::Calibrate,
            Command::Quantiles => Stage::Quantiles,
            Command::Report => Stage::Report,
            Command::All => Stage::All,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NonFinite(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Some(config) = cli.config.clone() else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot set up {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let opts = RunOptions {
        seed: cli.seed,
        out: cli.out.clone(),
        policy: if cli.strict_finite { NonFinitePolicy::Abort } else { NonFinitePolicy::CountAsFailure },
    };
    let res = RunConfig::load(&config).and_then(|cfg| Pipeline::new(cfg, &opts)).and_then(|p| p.run(cli.command.into()));
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
