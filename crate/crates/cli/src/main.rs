use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cesis::densities::input_density_by_name;
use cesis::estimators::OptimalSisTable;
use cesis::fmt::sig6;
use cesis::harness::{self, ExperimentSpec};
use cesis::model::ModelRegistry;
use cesis::{CesisError, RunReport};

/// Cross-entropy stochastic importance sampling for failure probabilities.
#[derive(Parser, Debug)]
#[command(name = "cesis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run repeated CE-SIS experiments.
    Run(Common),
    /// Run the crude Monte Carlo and optimal-SIS baselines.
    Baselines(Common),
    /// Print the failure probability at the configured threshold.
    OracleP {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the threshold with the given failure probability.
    CalibrateL {
        #[arg(long)]
        config: PathBuf,
        /// Target probability; defaults to threshold.target_p in the config.
        #[arg(long)]
        target: Option<f64>,
    },
    /// KL divergence from the optimal density to each iteration's density.
    KlDiag {
        #[arg(long)]
        config: PathBuf,
        /// JSON report written by `run`.
        #[arg(long)]
        report: PathBuf,
    },
}

fn load(path: &Path, registry: &ModelRegistry) -> Result<ExperimentSpec, CesisError> {
    harness::load_config(path, registry)
}

fn apply(common: &Common, registry: &ModelRegistry) -> Result<ExperimentSpec, CesisError> {
    let mut spec = load(&common.config, registry)?;
    if let Some(seed) = common.seed {
        spec.run.seed = seed;
    }
    if let Some(reps) = common.reps {
        spec.repetitions = reps;
    }
    if common.jobs == Some(0) {
        return Err(CesisError::config("--jobs must be at least 1"));
    }
    spec.out_dir = Some(common.out.clone());
    spec.validate()?;
    Ok(spec)
}

fn oracle_for(
    spec: &ExperimentSpec,
    registry: &ModelRegistry,
) -> Result<(std::sync::Arc<dyn cesis::SimulationModel>, Box<dyn cesis::InputDensity>), CesisError> {
    let model = registry.get(&spec.run.model)?;
    if model.as_oracle().is_none() {
        return Err(CesisError::config(format!("model {} has no closed-form exceedance", spec.run.model)));
    }
    let f = input_density_by_name(&spec.run.input_density, spec.run.input_dim)?;
    Ok((model, f))
}

fn execute(cli: Cli) -> Result<(), CesisError> {
    let registry = ModelRegistry::default();
    match cli.command {
        Command::Run(common) => {
            let spec = apply(&common, &registry)?;
            let row = cesis::parallel::with_threads(common.jobs, || harness::cmd_run(&spec, &registry, &common.out))?;
            println!("{}", harness::SummaryRow::CSV_HEADER);
            println!("{}", row.csv_line());
        }
        Command::Baselines(common) => {
            let spec = apply(&common, &registry)?;
            let rows =
                cesis::parallel::with_threads(common.jobs, || harness::cmd_baselines(&spec, &registry, &common.out))?;
            println!("{}", harness::SummaryRow::CSV_HEADER);
            for row in rows {
                println!("{}", row.csv_line());
            }
        }
        Command::OracleP { config } => {
            let spec = load(&config, &registry)?;
            let (model, f) = oracle_for(&spec, &registry)?;
            let p = harness::oracle_p(model.as_oracle().unwrap(), f.as_ref(), spec.run.threshold)?;
            println!("{p:.12e}");
        }
        Command::CalibrateL { config, target } => {
            let spec = load(&config, &registry)?;
            let target = target
                .or(spec.target_p)
                .ok_or_else(|| CesisError::config("no target probability: pass --target or set threshold.target_p"))?;
            let (model, f) = oracle_for(&spec, &registry)?;
            let l = harness::calibrate_l(model.as_oracle().unwrap(), f.as_ref(), target)?;
            println!("{l:.15}");
        }
        Command::KlDiag { config, report } => {
            let spec = load(&config, &registry)?;
            let (model, f) = oracle_for(&spec, &registry)?;
            let text = std::fs::read_to_string(&report)?;
            let report = RunReport::from_json(&text)?;
            let table = OptimalSisTable::build(model.as_oracle().unwrap(), f.as_ref(), report.threshold, report.n_total)?;
            println!("iteration,kl");
            for (t, kl) in harness::kl_diag(&report, &table).into_iter().enumerate() {
                println!("{t},{}", sig6(kl));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
