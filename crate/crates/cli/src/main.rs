//! canopy-ledger: map shade-tree cover and above-ground biomass from raster
//! inputs, fit the cover-biomass relationship, and account carbon scenarios.
//!
//! Each subcommand runs one pipeline stage against a JSON config; any
//! `--key.path=value` argument overrides the corresponding config key.
//! Exit codes: 0 success, 2 validation or dependency error, 3 sampler
//! convergence failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use canopy_ledger::Error;
use canopy_ledger_cli::config::Config;
use canopy_ledger_cli::stages::{run_all, run_stage, STAGE_NAMES};

#[derive(Parser, Debug)]
#[command(
    name = "canopy-ledger",
    about = "Shade-tree cover and biomass mapping pipeline with carbon scenario accounting",
    after_help = "STAGES:\n  synth ingest groundtruth train-shade map-shade train-agbd map-agbd\n  fit-carbon scenario zones landuse report\n  all        run every stage in order\n\nOVERRIDES:\n  --<key.path>=<value>   override any config key, e.g. --carbon.thresholds=[30]"
)]
struct Args {
    /// Stage to run (or `all`).
    stage: String,

    /// JSON config file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Worker threads (overrides config `jobs`; env CANOPY_LEDGER_JOBS).
    #[arg(long)]
    jobs: Option<usize>,

    /// Master seed shorthand for `--seed=N`.
    #[arg(long)]
    seed: Option<u64>,

    /// Run directory shorthand for `--run_dir=…`.
    #[arg(long)]
    run_dir: Option<PathBuf>,

    /// Config overrides as `key.path=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for item in raw {
        let stripped = item.strip_prefix("--").ok_or_else(|| {
            Error::Argument(format!("override '{item}' must look like --key.path=value"))
        })?;
        let (key, value) = stripped.split_once('=').ok_or_else(|| {
            Error::Argument(format!("override '{item}' is missing '=value'"))
        })?;
        out.push((key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn run() -> Result<(), Error> {
    let args = Args::parse();
    let mut overrides = parse_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    if let Some(dir) = &args.run_dir {
        overrides.push(("run_dir".to_string(), dir.display().to_string()));
    }
    let mut config = Config::load(args.config.as_deref(), &overrides)?;
    if let Some(jobs) = args.jobs {
        config.jobs = jobs;
    } else if let Ok(env_jobs) = std::env::var("CANOPY_LEDGER_JOBS") {
        if config.jobs == 0 {
            config.jobs = env_jobs.parse().map_err(|_| {
                Error::Argument(format!("CANOPY_LEDGER_JOBS='{env_jobs}' is not a number"))
            })?;
        }
    }
    if config.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }

    match args.stage.as_str() {
        "all" => run_all(&config),
        stage if STAGE_NAMES.contains(&stage) => run_stage(&config, stage),
        other => Err(Error::Argument(format!(
            "unknown stage '{other}'; expected one of {STAGE_NAMES:?} or 'all'"
        ))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Convergence(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
