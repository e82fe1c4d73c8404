//! The `fedcac` command line: `run`, `sweep` and `probe`.
//!
//! Commands are plain functions so that tests can drive them without a
//! subprocess. Usage problems (unreadable or invalid config, bad overrides,
//! bad sweep arguments) map to exit code 2; failures while running or
//! writing map to exit code 1.

pub mod config;
mod output;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedcac_core::orchestrator::{self, OverlapStudy};
use fedcac_core::{data, PartitionMode, RunConfig, Simulation};
use serde::Serialize;

pub use config::LoadedConfig;
use output::OutputDir;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(2),
            CliError::Runtime(_) => ExitCode::from(1),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Configuration and partition errors describe bad input, so they are usage
/// errors even when they only surface once data is generated.
impl From<fedcac_core::Error> for CliError {
    fn from(e: fedcac_core::Error) -> Self {
        match e {
            fedcac_core::Error::Config(_) | fedcac_core::Error::Partition { .. } => CliError::Usage(e.to_string()),
            e => CliError::Runtime(e.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fedcac", version, about = "Personalized federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write history.jsonl and summary.json.
    Run(CommonArgs),
    /// Run the config once per value (and per seed) of one parameter and
    /// write sweep.csv.
    Sweep(SweepArgs),
    /// Run a diagnostic and write its CSV.
    Probe(ProbeArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set tau=0.3 --set model.hidden=[64]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the client phase. Results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overwrite existing output files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Tau,
    Beta,
    Alpha,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProbeKind {
    Angles,
    Heatmap,
    OverlapStudy,
    PartitionViz,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[arg(value_enum)]
    pub probe: ProbeKind,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn execute(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Probe(args) => cmd_probe(&args),
    }
}

/// Config file, overrides and command-line flags merged and validated.
pub fn resolve(args: &CommonArgs) -> Result<LoadedConfig, CliError> {
    let mut loaded = config::load(&args.config, &args.overrides)?;
    if let Some(seed) = args.seed {
        loaded.run.seed = seed;
    }
    if let Some(out) = &args.out {
        loaded.output.dir.clone_from(out);
    }
    loaded
        .run
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(loaded)
}

fn with_workers<T>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError>
where
    T: Send,
{
    match workers {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--workers must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Runtime(e.into()))?;
            Ok(pool.install(f))
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    best_accuracy: f64,
    best_round: usize,
    final_accuracy: f64,
    config: &'a RunConfig,
}

pub fn cmd_run(args: &CommonArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve(args)?;
    let out = OutputDir::prepare(&cfg.output.dir, &["history.jsonl", "summary.json"], args.force)?;
    let history = with_workers(args.workers, || orchestrator::run(&cfg.run))??;

    let summary = Summary {
        best_accuracy: history.best_accuracy,
        best_round: history.best_round,
        final_accuracy: history.final_accuracy(),
        config: &cfg.run,
    };
    let mut written = Vec::new();
    written.push(out.write("history.jsonl", |w| {
        orchestrator::write_history_jsonl(&history.history, w).map_err(Into::into)
    })?);
    written.push(out.write("summary.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &summary)?;
        w.write_all(b"\n")?;
        Ok(())
    })?);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub best_accuracy: f64,
    pub std: f64,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve(&args.common)?;
    if args.values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    if cfg.sweep.seeds == 0 {
        return Err(CliError::Usage("sweep.seeds must be at least 1".into()));
    }
    if args.param == SweepParam::Alpha && cfg.run.partition.mode != PartitionMode::Dirichlet {
        return Err(CliError::Usage("an alpha sweep needs partition.mode = \"dirichlet\"".into()));
    }
    let mut variants = Vec::with_capacity(args.values.len());
    for &v in &args.values {
        let mut run = cfg.run.clone();
        match args.param {
            SweepParam::Tau => run.tau = v,
            SweepParam::Beta => run.beta = v,
            SweepParam::Alpha => run.partition.alpha = v,
        }
        run.validate()
            .map_err(|e| CliError::Usage(format!("value {v}: {e}")))?;
        variants.push(run);
    }
    let out = OutputDir::prepare(&cfg.output.dir, &["sweep.csv"], args.common.force)?;

    let seeds = cfg.sweep.seeds;
    let rows = with_workers(args.common.workers, || {
        variants
            .iter()
            .zip(&args.values)
            .map(|(run, &value)| {
                let bests = (0..seeds)
                    .map(|k| {
                        let seeded = RunConfig { seed: run.seed.wrapping_add(k), ..run.clone() };
                        orchestrator::run(&seeded).map(|h| h.best_accuracy)
                    })
                    .collect::<fedcac_core::Result<Vec<f64>>>()?;
                let (mean, std) = mean_std(&bests);
                Ok(SweepRow { value, best_accuracy: mean, std })
            })
            .collect::<fedcac_core::Result<Vec<_>>>()
    })??;

    let path = out.write("sweep.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(vec![path])
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve(&args.common)?;
    let name = match args.probe {
        ProbeKind::Angles => "angles.csv",
        ProbeKind::Heatmap => "heatmap.csv",
        ProbeKind::OverlapStudy => "overlap_study.csv",
        ProbeKind::PartitionViz => "partition.csv",
    };
    let study = OverlapStudy { duplicate_pairs: cfg.probe.duplicate_pairs };
    let planted = cfg.probe.planted || cfg.probe.duplicate_pairs;
    let simulation = || -> fedcac_core::Result<Simulation> {
        if planted {
            Ok(orchestrator::planted_simulation(&cfg.run, study)?.0)
        } else {
            Simulation::new(cfg.run.clone())
        }
    };
    let check_client = |c: usize| {
        if c >= cfg.run.clients {
            Err(CliError::Usage(format!("probe client {c} out of range for {} clients", cfg.run.clients)))
        } else {
            Ok(())
        }
    };
    match args.probe {
        ProbeKind::Angles => {
            check_client(cfg.probe.client_a)?;
            check_client(cfg.probe.client_b)?;
        }
        ProbeKind::Heatmap => check_client(cfg.probe.client)?,
        _ => {}
    }
    let out = OutputDir::prepare(&cfg.output.dir, &[name], args.common.force)?;

    let path = match args.probe {
        ProbeKind::Angles => {
            let angles = with_workers(args.common.workers, || {
                orchestrator::gradient_angle_probe_on(simulation()?, cfg.probe.client_a, cfg.probe.client_b)
            })??;
            out.write(name, |w| orchestrator::write_angles(&angles, w).map_err(Into::into))?
        }
        ProbeKind::Heatmap => {
            let sim = with_workers(args.common.workers, || -> fedcac_core::Result<Simulation> {
                let mut sim = simulation()?;
                while !sim.is_finished() {
                    sim.step()?;
                }
                Ok(sim)
            })??;
            let layer = cfg
                .probe
                .layer
                .clone()
                .unwrap_or_else(|| sim.spec().head_layer_names()[0].clone());
            let state = &sim.clients()[cfg.probe.client];
            let sens = state.sensitivity.as_ref().expect("at least one round was run");
            if sens.layer(&layer).is_none() {
                return Err(CliError::Usage(format!("unknown layer `{layer}`")));
            }
            out.write(name, |w| orchestrator::write_sensitivity_heatmap(sens, &layer, w).map_err(Into::into))?
        }
        ProbeKind::OverlapStudy => {
            let rows = with_workers(args.common.workers, || orchestrator::overlap_similarity_study(&cfg.run, study))??;
            out.write(name, |w| orchestrator::write_overlap_study(&rows, w).map_err(Into::into))?
        }
        ProbeKind::PartitionViz => {
            let shards = if planted {
                simulation()?.clients().iter().map(|c| c.shard.clone()).collect()
            } else {
                cfg.run.build_shards()?
            };
            out.write(name, |w| data::write_partition_viz(&shards, w).map_err(Into::into))?
        }
    };
    Ok(vec![path])
}
