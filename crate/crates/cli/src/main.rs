use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};

mod config;
mod output;
mod run;

use config::Experiment;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Core(#[from] disspec_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_resource_refusal() => 4,
            CliError::Core(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ExperimentArg {
    FreefermionDs,
    DickeScan,
    DickeQuench,
    KbeCompare,
    GdrtVerify,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::FreefermionDs => Experiment::FreefermionDs,
            ExperimentArg::DickeScan => Experiment::DickeScan,
            ExperimentArg::DickeQuench => Experiment::DickeQuench,
            ExperimentArg::KbeCompare => Experiment::KbeCompare,
            ExperimentArg::GdrtVerify => Experiment::GdrtVerify,
        }
    }
}

/// Dissipation-spectroscopy experiments.
///
/// Exit codes: 0 success, 1 i/o failure, 2 config error, 3 numerical
/// failure, 4 refused for resource limits.
#[derive(Debug, Parser)]
#[command(name = "disspec", version)]
struct Args {
    experiment: ExperimentArg,
    /// TOML config; defaults are used when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory (overrides `out` in the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// worker threads
    #[arg(long)]
    workers: Option<usize>,
    /// dotted-path override, e.g. `freefermion-ds.gamma=0.02`
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match execute(&args) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("disspec: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn execute(args: &Args) -> Result<PathBuf, CliError> {
    let start = Instant::now();
    let wanted: Experiment = args.experiment.into();
    let cfg = match &args.config {
        Some(p) => config::load_config(p, &args.overrides)?,
        None => config::parse_config(&format!("experiment = \"{}\"", wanted.name()), &args.overrides)?,
    };
    if cfg.experiment != wanted {
        return Err(CliError::Config(format!("config is for `{}`, command asked for `{}`", cfg.experiment.name(), wanted.name())));
    }
    let workers = args.workers.or(cfg.workers);
    if workers == Some(0) {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = args.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(wanted.name()));
    let mut sink = output::OutputDir::create(&out)?;
    run::run(&cfg, &mut sink)?;
    sink.write_manifest(&cfg, start.elapsed().as_secs_f64())?;
    Ok(out)
}
