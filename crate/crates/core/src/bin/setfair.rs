//! Command-line interface: reproducible, config-driven set-prediction and
//! fairness-audit pipelines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use setfair::config::{Method, Overrides, RunConfig};
use setfair::error::Result;
use setfair::run;
use setfair::scores::ScoreKind;

#[derive(Parser)]
#[command(
    name = "setfair",
    version,
    about = "Set prediction with coverage guarantees, fairness audits, and clustered inference"
)]
struct Cli {
    /// TOML run configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Miscoverage rate in (0, 1).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Predictor method: marginal | mondrian | avgk.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Score function: lac | aps | raps | saps.
    #[arg(long, global = true)]
    score: Option<String>,
    /// Output file (single-output commands) — defaults into output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Internal parallelism bound; 0 means one thread per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a predictor and write its JSON artifact.
    Calibrate,
    /// Produce prediction sets for a dataset from a predictor artifact.
    Predict {
        /// Predictor artifact written by `calibrate`.
        #[arg(long)]
        predictor: PathBuf,
        /// Dataset to predict on; defaults to the configured test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Search score hyperparameters (marginal/mondrian) or the avg-k size.
    Tune,
    /// Fairness metrics of a sets CSV.
    Audit {
        /// Sets CSV written by `predict`.
        #[arg(long)]
        sets: PathBuf,
        /// Declared group count; defaults to max group index + 1.
        #[arg(long)]
        groups: Option<usize>,
    },
    /// Simulate set-assisted human responses on a synthetic task.
    Simulate,
    /// Fit the clustered logistic model on a responses CSV.
    Stats {
        /// Responses CSV written by `simulate` (or imported).
        #[arg(long)]
        responses: PathBuf,
    },
    /// Run the coverage/size/impact tradeoff benchmark.
    BenchMechanism,
    /// Check that output files embed the effective config hash.
    Verify {
        files: Vec<PathBuf>,
    },
}

fn build_overrides(cli: &Cli) -> Result<Overrides> {
    Ok(Overrides {
        seed: cli.seed,
        alpha: cli.alpha,
        method: cli.method.as_deref().map(str::parse::<Method>).transpose()?,
        score_kind: cli.score.as_deref().map(str::parse::<ScoreKind>).transpose()?,
        output_dir: None,
        jobs: cli.jobs,
    })
}

fn dispatch(cli: &Cli) -> Result<()> {
    let overrides = build_overrides(cli)?;
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Calibrate => {
            run::cmd_calibrate(&config, out)?;
        }
        Command::Predict { predictor, data } => {
            run::cmd_predict(&config, predictor, data.as_deref(), out)?;
        }
        Command::Tune => {
            run::cmd_tune(&config, out)?;
        }
        Command::Audit { sets, groups } => {
            run::cmd_audit(&config, sets, *groups, out)?;
        }
        Command::Simulate => {
            run::cmd_simulate(&config, out)?;
        }
        Command::Stats { responses } => {
            run::cmd_stats(&config, responses, out)?;
        }
        Command::BenchMechanism => {
            run::cmd_bench_mechanism(&config, out)?;
        }
        Command::Verify { files } => {
            run::cmd_verify(&config, files)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
