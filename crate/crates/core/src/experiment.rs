//! Batch experiments: CSV ingestion with a stratified hold-out split,
//! baseline runs, profile sweeps, and speedup/fitness reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineConfig, EngineError, InteractionRecord, Session, SessionResult, StartOptions};
use crate::evaluation::{balanced_accuracy, evaluation_rng, make_fold_plan, Clock, EvaluationRecord, SharedResults, WallClock};
use crate::grammar::Grammar;
use crate::mlcatalog::{fit_pipeline, predict_pipeline, Dataset, DatasetError};
use crate::search::WorkflowSpec;
use crate::simusers::{run_simulated, speedup, Profile, Schedule};

pub const BASELINE: &str = "baseline";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: row {row}, column `{column}`: {reason}")]
    BadCell {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("training split has a single class")]
    SingleClassTrain,
    #[error("{context}: {source}")]
    Engine {
        context: String,
        #[source]
        source: EngineError,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("no result files under {0}")]
    EmptyResults(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// How to obtain the hold-out set.
#[derive(Clone, Debug, PartialEq)]
pub enum Split {
    /// Stratified random hold-out of `fraction` of the rows (rounded up).
    Fraction { fraction: f64, seed: u64 },
    /// The given file is the training set; this one is the test set.
    PreSplit { test: PathBuf },
}

impl Split {
    pub fn one_third(seed: u64) -> Self {
        Split::Fraction {
            fraction: 1.0 / 3.0,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub name: String,
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    labels: Vec<String>,
}

fn read_table(path: &Path) -> Result<RawTable, ExperimentError> {
    let csv_err = |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(ExperimentError::BadFile {
            path: path.to_path_buf(),
            reason: "need at least one feature column and a label column".into(),
        });
    }
    let width = header.len() - 1;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |c: usize, reason: &str| ExperimentError::BadCell {
            path: path.to_path_buf(),
            row: r + 2,
            column: header[c].clone(),
            reason: reason.to_string(),
        };
        let mut row = Vec::with_capacity(width);
        for c in 0..width {
            let cell = &rec[c];
            if cell.is_empty() || cell == "?" || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                return Err(bad(c, "missing value"));
            }
            let v: f64 = cell.parse().map_err(|_| bad(c, "not a number"))?;
            if !v.is_finite() {
                return Err(bad(c, "not finite"));
            }
            row.push(v);
        }
        let label = &rec[width];
        if label.is_empty() || label == "?" {
            return Err(bad(width, "missing label"));
        }
        rows.push(row);
        labels.push(label.to_string());
    }
    Ok(RawTable {
        columns: header,
        rows,
        labels,
    })
}

fn to_dataset(name: &str, t: &RawTable, idx: &[usize], classes: &[String]) -> Result<Dataset, ExperimentError> {
    let width = t.columns.len() - 1;
    let x = Array2::from_shape_fn((idx.len(), width), |(i, j)| t.rows[idx[i]][j]);
    let y = idx
        .iter()
        .map(|&i| classes.binary_search(&t.labels[i]).expect("label in class list"))
        .collect();
    Ok(Dataset::new(name, x, y, classes.to_vec())?)
}

/// Stratified hold-out: each class contributes its proportional share of
/// `ceil(n * fraction)` test rows, remainders going to the largest
/// fractional parts (ties to the lower class index).
pub fn stratified_split(labels: &[usize], n_classes: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let n_test = (n as f64 * fraction).ceil() as usize;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let exact: Vec<f64> = by_class.iter().map(|m| m.len() as f64 * n_test as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n_test - quota.iter().sum::<usize>();
    for c in order.into_iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (members, q) in by_class.iter_mut().zip(quota) {
        members.shuffle(&mut rng);
        test.extend_from_slice(&members[..q]);
        train.extend_from_slice(&members[q..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Reads a CSV (header row, numeric features, label last) and splits it.
/// Class names are sorted so train and test share one mapping.
pub fn load_dataset(path: &Path, split: &Split) -> Result<LoadedDataset, ExperimentError> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let table = read_table(path)?;
    let (train, test) = match split {
        Split::Fraction { fraction, seed } => {
            let classes: Vec<String> = table.labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            let labels: Vec<usize> = table
                .labels
                .iter()
                .map(|l| classes.binary_search(l).unwrap())
                .collect();
            let (tr, te) = stratified_split(&labels, classes.len(), *fraction, *seed);
            if tr.iter().map(|&i| labels[i]).collect::<BTreeSet<_>>().len() < 2 {
                return Err(ExperimentError::SingleClassTrain);
            }
            (to_dataset(&name, &table, &tr, &classes)?, to_dataset(&name, &table, &te, &classes)?)
        }
        Split::PreSplit { test } => {
            let other = read_table(test)?;
            if other.columns.len() != table.columns.len() {
                return Err(ExperimentError::BadFile {
                    path: test.clone(),
                    reason: format!("{} columns, training file has {}", other.columns.len(), table.columns.len()),
                });
            }
            let classes: Vec<String> = table
                .labels
                .iter()
                .chain(&other.labels)
                .cloned()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if table.labels.iter().collect::<BTreeSet<_>>().len() < 2 {
                return Err(ExperimentError::SingleClassTrain);
            }
            let all = |t: &RawTable| (0..t.rows.len()).collect::<Vec<_>>();
            (
                to_dataset(&name, &table, &all(&table), &classes)?,
                to_dataset(&name, &other, &all(&other), &classes)?,
            )
        }
    };
    Ok(LoadedDataset {
        name,
        train: Arc::new(train),
        test: Arc::new(test),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub dataset: String,
    /// A profile id, or `baseline`.
    pub profile: String,
    pub seed: u64,
    pub workflow: WorkflowSpec,
    pub fitness: f64,
    pub eval_time: f64,
    pub test_balanced_accuracy: f64,
    /// Cumulative evaluation time per generation, initial population first.
    pub timeline: Vec<f64>,
    /// Evaluation time after the first interaction point.
    pub window_eval_time: f64,
    pub first_interaction_generation: usize,
    pub wall_time_seconds: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    #[serde(default)]
    pub interactions: Vec<InteractionRecord>,
}

impl ExperimentResult {
    pub fn file_stem(&self) -> String {
        format!("{}__{}__s{}", self.dataset, self.profile, self.seed)
    }
}

/// Refits on the whole training split and scores the hold-out set.
/// A workflow that cannot be refit scores 0.
pub fn test_accuracy(w: &WorkflowSpec, train: &Dataset, test: &Dataset, seed: u64) -> f64 {
    let mut rng = evaluation_rng(seed, &w.canonical_key);
    fit_pipeline(w, train, &mut rng)
        .and_then(|steps| predict_pipeline(&steps, test.features.view()))
        .ok()
        .and_then(|pred| balanced_accuracy(&test.labels, &pred).ok())
        .unwrap_or(0.0)
}

/// Execution knobs shared by every run in a batch.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub clock: Arc<dyn Clock>,
    /// Concurrent runs in a sweep.
    pub workers: usize,
    /// Where results and logs go; nothing is written when unset.
    pub out: Option<PathBuf>,
    /// Reuse evaluations between runs that share dataset and seed.
    pub share_results: bool,
    pub grammar: Grammar,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            clock: Arc::new(WallClock),
            workers: 1,
            out: None,
            share_results: true,
            grammar: Grammar::default_grammar(),
        }
    }
}

fn finish(
    ds: &LoadedDataset,
    profile: &str,
    seed: u64,
    schedule: Schedule,
    result: SessionResult,
    started: Instant,
    out: Option<&Path>,
) -> Result<ExperimentResult, ExperimentError> {
    let record: &EvaluationRecord = result.archive.evaluation.as_ref().expect("archive is evaluated");
    let r = ExperimentResult {
        dataset: ds.name.clone(),
        profile: profile.to_string(),
        seed,
        workflow: result.archive.workflow.clone(),
        fitness: record.fitness,
        eval_time: record.eval_time,
        test_balanced_accuracy: test_accuracy(&result.archive.workflow, &ds.train, &ds.test, seed),
        window_eval_time: schedule.window_time(&result.timeline),
        first_interaction_generation: schedule.first,
        timeline: result.timeline,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        cache_hits: result.cache_hits,
        cache_misses: result.cache_misses,
        interactions: result.interactions,
    };
    if let Some(dir) = out {
        let path = dir.join("results").join(format!("{}.json", r.file_stem()));
        let file = File::create(&path).map_err(io_err(&path))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &r).map_err(|source| ExperimentError::Json { path, source })?;
    }
    Ok(r)
}

fn prepare_out(out: Option<&Path>) -> Result<(), ExperimentError> {
    if let Some(dir) = out {
        for sub in ["results", "logs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

fn open_log(out: Option<&Path>, stem: &str) -> Result<Option<Box<dyn Write + Send>>, ExperimentError> {
    let Some(dir) = out else {
        return Ok(None);
    };
    let path = dir.join("logs").join(format!("{stem}.jsonl"));
    let f = File::create(&path).map_err(io_err(&path))?;
    Ok(Some(Box::new(BufWriter::new(f))))
}

fn start_options(opts: &RunOptions, shared: Option<Arc<SharedResults>>) -> StartOptions {
    StartOptions {
        clock: opts.clock.clone(),
        workers: 1,
        shared,
    }
}

/// One run with interaction switched off. The speedup window follows the
/// scaled two-pause schedule for the configured length.
pub fn run_baseline(ds: &LoadedDataset, config: &EngineConfig, seed: u64, opts: &RunOptions) -> Result<ExperimentResult, ExperimentError> {
    prepare_out(opts.out.as_deref())?;
    run_baseline_with(ds, config, seed, opts, None)
}

fn run_baseline_with(
    ds: &LoadedDataset,
    config: &EngineConfig,
    seed: u64,
    opts: &RunOptions,
    shared: Option<Arc<SharedResults>>,
) -> Result<ExperimentResult, ExperimentError> {
    let schedule = Schedule::scaled(config.max_generations);
    let cfg = EngineConfig {
        seed,
        max_interactions: 0,
        ..config.clone()
    };
    let started = Instant::now();
    let stem = format!("{}__{BASELINE}__s{seed}", ds.name);
    let log = open_log(opts.out.as_deref(), &stem)?;
    let ctx = |source| ExperimentError::Engine {
        context: stem.clone(),
        source,
    };
    let mut s = Session::start_logged(cfg, opts.grammar.clone(), ds.train.clone(), start_options(opts, shared), log).map_err(ctx)?;
    s.run_until_pause().map_err(ctx)?;
    let result = s.result().map_err(ctx)?;
    finish(ds, BASELINE, seed, schedule, result, started, opts.out.as_deref())
}

fn run_profile(
    ds: &LoadedDataset,
    profile: &Profile,
    config: &EngineConfig,
    seed: u64,
    opts: &RunOptions,
    shared: Option<Arc<SharedResults>>,
) -> Result<ExperimentResult, ExperimentError> {
    let schedule = Schedule::scaled(config.max_generations);
    let cfg = EngineConfig {
        seed,
        ..config.clone()
    };
    let started = Instant::now();
    let stem = format!("{}__{}__s{seed}", ds.name, profile.id());
    let log = open_log(opts.out.as_deref(), &stem)?;
    let run = run_simulated(profile, &cfg, opts.grammar.clone(), ds.train.clone(), schedule, start_options(opts, shared), log)
        .map_err(|source| ExperimentError::Engine {
            context: stem.clone(),
            source,
        })?;
    finish(ds, &profile.id(), seed, schedule, run.result, started, opts.out.as_deref())
}

#[derive(Debug)]
pub struct SweepOutput {
    pub results: Vec<ExperimentResult>,
    /// Runs that failed, as (dataset, profile, seed, message).
    pub failures: Vec<(String, String, u64, String)>,
    pub report: SpeedupReport,
}

/// Every (dataset, profile, repeat) plus one baseline per (dataset,
/// repeat), with seed = base_seed + repeat. Results come back in a fixed
/// order regardless of `opts.workers`.
pub fn run_sweep(
    datasets: &[LoadedDataset],
    profiles: &[Profile],
    repeats: usize,
    config: &EngineConfig,
    base_seed: u64,
    opts: &RunOptions,
) -> Result<SweepOutput, ExperimentError> {
    prepare_out(opts.out.as_deref())?;
    #[derive(Clone, Copy)]
    struct Job {
        dataset: usize,
        profile: Option<usize>,
        seed: u64,
    }
    let mut jobs = Vec::new();
    for dataset in 0..datasets.len() {
        for r in 0..repeats {
            let seed = base_seed + r as u64;
            jobs.push(Job { dataset, profile: None, seed });
            for p in 0..profiles.len() {
                jobs.push(Job {
                    dataset,
                    profile: Some(p),
                    seed,
                });
            }
        }
    }
    let mut shared: HashMap<(usize, u64), Arc<SharedResults>> = HashMap::new();
    if opts.share_results {
        for j in &jobs {
            if let std::collections::hash_map::Entry::Vacant(e) = shared.entry((j.dataset, j.seed)) {
                let train = &datasets[j.dataset].train;
                let plan = make_fold_plan(&train.labels, config.cv_folds, j.seed).map_err(|e| ExperimentError::Engine {
                    context: datasets[j.dataset].name.clone(),
                    source: e.into(),
                })?;
                e.insert(SharedResults::new(train, &plan, j.seed));
            }
        }
    }
    let run = |j: &Job| {
        let ds = &datasets[j.dataset];
        let memo = shared.get(&(j.dataset, j.seed)).cloned();
        let r = match j.profile {
            None => run_baseline_with(ds, config, j.seed, opts, memo),
            Some(p) => run_profile(ds, &profiles[p], config, j.seed, opts, memo),
        };
        let label = j.profile.map_or_else(|| BASELINE.to_string(), |p| profiles[p].id());
        r.map_err(|e| (ds.name.clone(), label, j.seed, e.to_string()))
    };
    let outcomes: Vec<_> = if opts.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers)
            .build()
            .expect("thread pool");
        pool.install(|| jobs.par_iter().map(run).collect())
    } else {
        jobs.iter().map(run).collect()
    };
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    let report = SpeedupReport::from_results(&results);
    if let Some(dir) = opts.out.as_deref() {
        report.write_csv(dir)?;
    }
    Ok(SweepOutput {
        results,
        failures,
        report,
    })
}

/// Median and quartiles with linear interpolation between order statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Some(Self {
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub dataset: String,
    pub profile: String,
    pub runs: usize,
    pub speedup: Quartiles,
    /// Interactive window time over baseline window time.
    pub median_time_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitnessRow {
    pub dataset: String,
    pub profile: String,
    pub runs: usize,
    pub mean_fitness: f64,
    pub mean_test_balanced_accuracy: f64,
    /// Mean fitness minus the baseline's; absent without a baseline.
    pub delta_vs_baseline: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub speedups: Vec<SpeedupRow>,
    pub fitness: Vec<FitnessRow>,
    /// Fitness aggregated over datasets, per profile.
    pub per_profile: Vec<FitnessRow>,
}

impl SpeedupReport {
    /// Pairs each interactive run with the baseline of the same dataset
    /// and seed; runs without a matching baseline get no speedup.
    pub fn from_results(results: &[ExperimentResult]) -> Self {
        let baseline: HashMap<(&str, u64), &ExperimentResult> = results
            .iter()
            .filter(|r| r.profile == BASELINE)
            .map(|r| ((r.dataset.as_str(), r.seed), r))
            .collect();
        let mut groups: BTreeMap<(&str, &str), Vec<&ExperimentResult>> = BTreeMap::new();
        for r in results {
            groups.entry((&r.dataset, &r.profile)).or_default().push(r);
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let mut report = SpeedupReport::default();
        let base_mean: BTreeMap<&str, f64> = groups
            .iter()
            .filter(|((_, p), _)| *p == BASELINE)
            .map(|((d, _), rs)| (*d, mean(&rs.iter().map(|r| r.fitness).collect::<Vec<_>>())))
            .collect();
        for ((dataset, profile), rs) in &groups {
            let fit: Vec<f64> = rs.iter().map(|r| r.fitness).collect();
            let test: Vec<f64> = rs.iter().map(|r| r.test_balanced_accuracy).collect();
            report.fitness.push(FitnessRow {
                dataset: dataset.to_string(),
                profile: profile.to_string(),
                runs: rs.len(),
                mean_fitness: mean(&fit),
                mean_test_balanced_accuracy: mean(&test),
                delta_vs_baseline: base_mean.get(dataset).map(|b| mean(&fit) - b),
            });
            if *profile == BASELINE {
                continue;
            }
            let pairs: Vec<(f64, f64)> = rs
                .iter()
                .filter_map(|r| baseline.get(&(*dataset, r.seed)).map(|b| (b.window_eval_time, r.window_eval_time)))
                .collect();
            let sp: Vec<f64> = pairs.iter().map(|&(b, i)| speedup(b, i)).collect();
            let ratio: Vec<f64> = pairs.iter().map(|&(b, i)| i / b).collect();
            if let (Some(q), Some(r)) = (Quartiles::of(&sp), Quartiles::of(&ratio)) {
                report.speedups.push(SpeedupRow {
                    dataset: dataset.to_string(),
                    profile: profile.to_string(),
                    runs: sp.len(),
                    speedup: q,
                    median_time_ratio: r.median,
                });
            }
        }
        let mut by_profile: BTreeMap<&str, Vec<&ExperimentResult>> = BTreeMap::new();
        for r in results {
            by_profile.entry(&r.profile).or_default().push(r);
        }
        let overall_base = by_profile
            .get(BASELINE)
            .map(|rs| mean(&rs.iter().map(|r| r.fitness).collect::<Vec<_>>()));
        for (profile, rs) in by_profile {
            let fit: Vec<f64> = rs.iter().map(|r| r.fitness).collect();
            let test: Vec<f64> = rs.iter().map(|r| r.test_balanced_accuracy).collect();
            report.per_profile.push(FitnessRow {
                dataset: "*".into(),
                profile: profile.to_string(),
                runs: rs.len(),
                mean_fitness: mean(&fit),
                mean_test_balanced_accuracy: mean(&test),
                delta_vs_baseline: overall_base.map(|b| mean(&fit) - b),
            });
        }
        report
    }

    pub fn speedup(&self, dataset: &str, profile: &str) -> Option<&SpeedupRow> {
        self.speedups.iter().find(|r| r.dataset == dataset && r.profile == profile)
    }

    /// Writes speedup.csv, fitness.csv and fitness_by_profile.csv.
    pub fn write_csv(&self, dir: &Path) -> Result<(), ExperimentError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("speedup.csv");
        let mut w = csv_writer(&path)?;
        let row = |w: &mut csv::Writer<File>, cells: Vec<String>| w.write_record(cells);
        let wrap = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ExperimentError::Csv { path, source }
        };
        row(&mut w, ["dataset", "profile", "runs", "speedup_q1", "speedup_median", "speedup_q3", "median_time_ratio"].map(String::from).to_vec())
            .map_err(wrap(&path))?;
        for r in &self.speedups {
            row(
                &mut w,
                vec![
                    r.dataset.clone(),
                    r.profile.clone(),
                    r.runs.to_string(),
                    r.speedup.q1.to_string(),
                    r.speedup.median.to_string(),
                    r.speedup.q3.to_string(),
                    r.median_time_ratio.to_string(),
                ],
            )
            .map_err(wrap(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        for (name, rows) in [("fitness.csv", &self.fitness), ("fitness_by_profile.csv", &self.per_profile)] {
            let path = dir.join(name);
            let mut w = csv_writer(&path)?;
            row(&mut w, ["dataset", "profile", "runs", "mean_fitness", "mean_test_balanced_accuracy", "delta_vs_baseline"].map(String::from).to_vec())
                .map_err(wrap(&path))?;
            for r in rows {
                row(
                    &mut w,
                    vec![
                        r.dataset.clone(),
                        r.profile.clone(),
                        r.runs.to_string(),
                        r.mean_fitness.to_string(),
                        r.mean_test_balanced_accuracy.to_string(),
                        r.delta_vs_baseline.map(|d| d.to_string()).unwrap_or_default(),
                    ],
                )
                .map_err(wrap(&path))?;
            }
            w.flush().map_err(io_err(&path))?;
        }
        Ok(())
    }

    /// Plain-text rendering of both tables.
    pub fn to_text(&self) -> String {
        let mut s = String::from("fitness\n");
        s += &format!("{:<14} {:<16} {:>5} {:>10} {:>10} {:>10}\n", "dataset", "profile", "runs", "fitness", "test_bacc", "delta");
        for r in self.fitness.iter().chain(&self.per_profile) {
            let delta = r.delta_vs_baseline.map_or_else(|| "-".to_string(), |d| format!("{d:+.4}"));
            s += &format!(
                "{:<14} {:<16} {:>5} {:>10.4} {:>10.4} {:>10}\n",
                r.dataset, r.profile, r.runs, r.mean_fitness, r.mean_test_balanced_accuracy, delta
            );
        }
        s += "\nspeedup\n";
        s += &format!("{:<14} {:<16} {:>5} {:>8} {:>8} {:>8}\n", "dataset", "profile", "runs", "q1", "median", "q3");
        for r in &self.speedups {
            s += &format!(
                "{:<14} {:<16} {:>5} {:>8.4} {:>8.4} {:>8.4}\n",
                r.dataset, r.profile, r.runs, r.speedup.q1, r.speedup.median, r.speedup.q3
            );
        }
        s
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, ExperimentError> {
    csv::Writer::from_path(path).map_err(|source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every `*.json` result under `dir` (or `dir/results`).
pub fn load_results(dir: &Path) -> Result<Vec<ExperimentResult>, ExperimentError> {
    let nested = dir.join("results");
    let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(io_err(&root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ExperimentError::EmptyResults(dir.to_path_buf()));
    }
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            serde_json::from_str(&text).map_err(|source| ExperimentError::Json { path: p, source })
        })
        .collect()
}

/// Aggregates a results directory and writes the CSV tables plus a
/// per-run `runs.csv` into `out`.
pub fn report(input: &Path, out: &Path) -> Result<SpeedupReport, ExperimentError> {
    let results = load_results(input)?;
    let report = SpeedupReport::from_results(&results);
    report.write_csv(out)?;
    let path = out.join("runs.csv");
    let mut w = csv_writer(&path)?;
    let wrap = |source| ExperimentError::Csv {
        path: path.clone(),
        source,
    };
    w.write_record(["dataset", "profile", "seed", "fitness", "eval_time", "test_balanced_accuracy", "window_eval_time", "wall_time_seconds", "workflow"])
        .map_err(wrap)?;
    for r in &results {
        w.write_record([
            r.dataset.clone(),
            r.profile.clone(),
            r.seed.to_string(),
            r.fitness.to_string(),
            r.eval_time.to_string(),
            r.test_balanced_accuracy.to_string(),
            r.window_eval_time.to_string(),
            r.wall_time_seconds.to_string(),
            r.workflow.canonical_key.clone(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(report)
}
