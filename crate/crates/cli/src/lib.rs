//! `evoflow` command line: baseline runs, simulated-user sweeps, reports and
//! the interactive HTTP service.
//!
//! A dataset `NAME.csv` with a sibling `NAME_test.csv` is used as a fixed
//! train/test pair; otherwise a stratified one-third test split is drawn
//! with `--split-seed`.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evoflow::engine::{EngineConfig, EngineError};
use evoflow::evaluation::{Clock, FakeClock, WallClock};
use evoflow::experiment::{self, load_dataset, ExperimentError, LoadedDataset, RunOptions, Split};
use evoflow::grammar::{parse_grammar, Grammar, GrammarError};
use evoflow::simusers::{Profile, ProfileError, Schedule};
use evoflow_service::ServiceConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{path}: {source}")]
    Grammar { path: PathBuf, source: GrammarError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Parser)]
#[command(name = "evoflow", version, about = "Interactive grammar-guided evolution of ML workflows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the optimiser without interaction.
    RunBaseline(BaselineArgs),
    /// Run simulated-user profiles plus baselines over several datasets.
    RunSweep(SweepArgs),
    /// Host interactive sessions over HTTP.
    Serve(ServeArgs),
    /// Aggregate result files into speedup and fitness tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// key=value file with EngineConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// BNF grammar file; the built-in grammar when absent.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Seed of the one-third test split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Concurrent runs (sweeps) or fold workers (single runs).
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value_t = ClockKind::Wall)]
    pub clock: ClockKind,
}

/// How evaluation time is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClockKind {
    /// Measured wall time; fitness ties then depend on timing noise.
    Wall,
    /// One unit per evaluation; reproducible bit for bit, and window times
    /// count evaluations.
    Constant,
}

impl ClockKind {
    pub fn clock(self) -> Arc<dyn Clock> {
        match self {
            ClockKind::Wall => Arc::new(WallClock),
            ClockKind::Constant => Arc::new(FakeClock::constant(1.0)),
        }
    }
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub datasets: Vec<PathBuf>,
    /// `all` or a comma-separated list of profile ids.
    #[arg(long, default_value = "all")]
    pub profiles: String,
    #[arg(long, default_value_t = 30)]
    pub repeats: usize,
    /// Base seed; repeat r uses seed + r.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate every run independently instead of sharing results between
    /// runs with the same dataset and seed.
    #[arg(long)]
    pub no_share: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub workdir: PathBuf,
    /// Fold workers per session.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::RunBaseline(a) => run_baseline(a),
        Command::RunSweep(a) => run_sweep(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    }
}

pub fn parse_profiles(list: &str) -> Result<Vec<Profile>, CliError> {
    if list.trim() == "all" {
        return Ok(Profile::suite());
    }
    let profiles = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Profile>, _>>()?;
    if profiles.is_empty() {
        return Err(CliError::Usage("no profiles given".into()));
    }
    Ok(profiles)
}

/// Loads `path`, pairing it with `<stem>_test.csv` when that file exists.
pub fn open_dataset(path: &Path, split_seed: u64) -> Result<LoadedDataset, CliError> {
    let test = path.with_file_name(format!(
        "{}_test.csv",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or_default()
    ));
    let split = if test.is_file() {
        Split::PreSplit { test }
    } else {
        Split::one_third(split_seed)
    };
    Ok(load_dataset(path, &split)?)
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a key=value config. Unless the file pins it, the first interaction
/// point follows the generation budget, the same way sweeps schedule it.
pub fn load_config(path: Option<&Path>) -> Result<EngineConfig, CliError> {
    let mut c = EngineConfig::default();
    let mut pinned = false;
    if let Some(p) = path {
        for line in read(p)?.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}: expected key=value, got `{line}`", p.display())))?;
            pinned |= k.trim() == "first_interaction_generation";
            c.set(k.trim(), v.trim())?;
        }
    }
    if !pinned {
        c.first_interaction_generation = Schedule::scaled(c.max_generations).first.max(1);
    }
    c.validate()?;
    Ok(c)
}

fn options(common: &Common, out: &Path) -> Result<RunOptions, CliError> {
    let grammar = match &common.grammar {
        Some(p) => parse_grammar(&read(p)?).map_err(|source| CliError::Grammar { path: p.clone(), source })?,
        None => Grammar::default_grammar(),
    };
    if common.workers == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    Ok(RunOptions {
        clock: common.clock.clock(),
        workers: common.workers,
        out: Some(out.to_path_buf()),
        grammar,
        ..RunOptions::default()
    })
}

fn run_baseline(a: BaselineArgs) -> Result<(), CliError> {
    let config = load_config(a.common.config.as_deref())?;
    let opts = options(&a.common, &a.out)?;
    let ds = open_dataset(&a.dataset, a.common.split_seed)?;
    let r = experiment::run_baseline(&ds, &config, a.seed, &opts)?;
    println!("dataset      {}", r.dataset);
    println!("seed         {}", r.seed);
    println!("workflow     {}", r.workflow);
    println!("fitness      {:.4}", r.fitness);
    println!("test bacc    {:.4}", r.test_balanced_accuracy);
    println!("eval time    {:.3}s", r.timeline.last().copied().unwrap_or(0.0));
    println!("result       {}", a.out.join("results").join(format!("{}.json", r.file_stem())).display());
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<(), CliError> {
    let config = load_config(a.common.config.as_deref())?;
    let profiles = parse_profiles(&a.profiles)?;
    let mut opts = options(&a.common, &a.out)?;
    opts.share_results = !a.no_share;
    let datasets = a
        .datasets
        .iter()
        .map(|p| open_dataset(p, a.common.split_seed))
        .collect::<Result<Vec<_>, _>>()?;
    let out = experiment::run_sweep(&datasets, &profiles, a.repeats, &config, a.seed, &opts)?;
    print!("{}", out.report.to_text());
    for (d, p, s, msg) in &out.failures {
        eprintln!("failed: {d} {p} seed {s}: {msg}");
    }
    println!("{} runs, {} failed; tables in {}", out.results.len() + out.failures.len(), out.failures.len(), a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad address: {e}")))?;
    let mut config = ServiceConfig::new(&a.workdir);
    config.workers = a.workers.max(1);
    let rt = tokio::runtime::Runtime::new().map_err(|source| CliError::Io {
        path: a.workdir.clone(),
        source,
    })?;
    println!("serving {} on http://{addr}", a.workdir.display());
    rt.block_on(evoflow_service::serve(addr, config)).map_err(|source| CliError::Io { path: a.workdir, source })
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let rep = experiment::report(&a.input, &a.out)?;
    print!("{}", rep.to_text());
    Ok(())
}
