//! `metacp`: simulate tasks, train quantile predictors, run coverage
//! experiments and summarize their results.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metacp_core::harness::{self, ExperimentConfig, MethodSet, RunMode};
use metacp_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(name = "metacp", version, about = "Few-shot conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and evaluation episodes and write them as CSV.
    Simulate(Common),
    /// Cross-fold train the quantile predictors and save them.
    Train(Common),
    /// Run the full experiment and write results and summary CSVs.
    Run(Common),
    /// Aggregate a results CSV into per-method, per-epsilon statistics.
    Summarize {
        /// Results file produced by `run`.
        results: PathBuf,
        /// Output directory; defaults to the directory of the results file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file whose keys are experiment config fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated significance levels.
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    /// all | meta | full | baselines
    #[arg(long)]
    method: Option<String>,
    /// marginal | conditional
    #[arg(long)]
    mode: Option<String>,
    /// Number of trials (marginal mode).
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(eps) = &self.epsilon {
            cfg.epsilons = eps.clone();
        }
        if let Some(delta) = self.delta {
            cfg.delta = delta;
        }
        if let Some(method) = &self.method {
            cfg.methods = method.parse::<MethodSet>()?;
        }
        if let Some(mode) = &self.mode {
            cfg.mode = mode.parse::<RunMode>()?;
        }
        if let Some(trials) = self.trials {
            cfg.n_trials = trials;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn summarize_file(results: &Path, out: Option<&Path>) -> Result<PathBuf, Error> {
    let rows = harness::read_results(BufReader::new(File::open(results)?))?;
    let dir = match out {
        Some(dir) => dir.to_path_buf(),
        None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(harness::SUMMARY_FILE);
    harness::write_summary(File::create(&path)?, &harness::summarize(&rows))?;
    Ok(path)
}

fn execute(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.resolve()?;
            report(&[harness::simulate(&cfg, &cfg.output)?]);
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            report(&harness::train_and_save(&cfg, &cfg.output)?);
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let outcome = harness::run(&cfg, &cfg.output)?;
            report(&outcome.files);
            if outcome.all_adjusted_infeasible {
                eprintln!("every requested (delta, epsilon) pair is infeasible with this calibration set");
                return Ok(EXIT_INFEASIBLE);
            }
        }
        Command::Summarize { results, out } => {
            report(&[summarize_file(&results, out.as_deref())?]);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            })
        }
    }
}
