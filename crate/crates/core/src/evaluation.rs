//! Fitness of a workflow: stratified k-fold cross-validated balanced
//! accuracy, timed by an injectable clock and memoised per canonical key.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mlcatalog::{class_counts, fit_pipeline, predict_pipeline, Dataset};
use crate::search::WorkflowSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty label vector")]
    Empty,
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
}

/// Mean per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.is_empty() {
        return Err(EvalError::Empty);
    }
    // ordered so the floating-point sum is reproducible
    let mut support: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let e = support.entry(t).or_default();
        e.0 += 1;
        if t == p {
            e.1 += 1;
        }
    }
    let sum: f64 = support.values().map(|&(n, ok)| ok as f64 / n as f64).sum();
    Ok(sum / support.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index of every training row.
    pub folds: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }
}

/// Shuffles each class, then deals its rows round-robin over the folds,
/// continuing from where the previous class stopped so fold sizes stay even.
pub fn make_fold_plan(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewFolds(k));
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
        for &i in rows.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldPlan { k, folds, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub fitness: f64,
    /// Seconds spent fitting and predicting all folds.
    pub eval_time: f64,
    pub failed: bool,
    pub classifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Measures one evaluation.
pub trait Stopwatch {
    fn elapsed(&self) -> f64;
}

/// Source of evaluation times; the key lets fake clocks vary per workflow.
pub trait Clock: Send + Sync + fmt::Debug {
    fn start(&self, key: &str) -> Box<dyn Stopwatch>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WallClock;

struct WallStopwatch(Instant);

impl Stopwatch for WallStopwatch {
    fn elapsed(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

impl Clock for WallClock {
    fn start(&self, _key: &str) -> Box<dyn Stopwatch> {
        Box::new(WallStopwatch(Instant::now()))
    }
}

struct Fixed(f64);

impl Stopwatch for Fixed {
    fn elapsed(&self) -> f64 {
        self.0
    }
}

type CostFn = Arc<dyn Fn(&str) -> f64 + Send + Sync>;

/// Deterministic clock for tests and simulations.
#[derive(Clone)]
pub enum FakeClock {
    /// Every evaluation takes the same time.
    Constant(f64),
    /// Evaluations take the scripted times in order; the last one repeats.
    Scripted(Arc<Mutex<VecDeque<f64>>>),
    /// Time as a function of the canonical key.
    PerKey(CostFn),
}

impl FakeClock {
    pub fn constant(secs: f64) -> Self {
        FakeClock::Constant(secs)
    }

    pub fn scripted(times: impl IntoIterator<Item = f64>) -> Self {
        FakeClock::Scripted(Arc::new(Mutex::new(times.into_iter().collect())))
    }

    pub fn per_key(f: impl Fn(&str) -> f64 + Send + Sync + 'static) -> Self {
        FakeClock::PerKey(Arc::new(f))
    }
}

impl fmt::Debug for FakeClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FakeClock::Constant(s) => write!(f, "FakeClock::Constant({s})"),
            FakeClock::Scripted(q) => write!(f, "FakeClock::Scripted({:?})", q.lock().map(|q| q.len())),
            FakeClock::PerKey(_) => f.write_str("FakeClock::PerKey"),
        }
    }
}

impl Clock for FakeClock {
    fn start(&self, key: &str) -> Box<dyn Stopwatch> {
        let t = match self {
            FakeClock::Constant(s) => *s,
            FakeClock::Scripted(q) => {
                let mut q = q.lock().expect("clock script poisoned");
                if q.len() > 1 {
                    q.pop_front().unwrap_or(0.0)
                } else {
                    q.front().copied().unwrap_or(0.0)
                }
            }
            FakeClock::PerKey(f) => f(key),
        };
        Box::new(Fixed(t))
    }
}

/// Canonical key -> record, computing each key at most once even under
/// concurrent misses.
#[derive(Debug, Default)]
pub struct EvaluationCache {
    entries: Mutex<HashMap<String, Arc<OnceLock<EvaluationRecord>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EvaluationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Peeks without touching the counters.
    pub fn get(&self, key: &str) -> Option<EvaluationRecord> {
        let cell = self.entries.lock().expect("cache poisoned").get(key).cloned()?;
        cell.get().cloned()
    }

    /// Returns the stored record or computes it; the flag is true on a hit.
    pub fn get_or_compute(&self, key: &str, compute: impl FnOnce() -> EvaluationRecord) -> (EvaluationRecord, bool) {
        let (cell, hit) = {
            let mut map = self.entries.lock().expect("cache poisoned");
            match map.get(key) {
                Some(c) => (c.clone(), true),
                None => {
                    let c = Arc::new(OnceLock::new());
                    map.insert(key.to_string(), c.clone());
                    (c, false)
                }
            }
        };
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
        (cell.get_or_init(compute).clone(), hit)
    }
}

/// Random stream for one workflow, derived from the session seed and the
/// canonical key so that equal keys always train identically.
pub fn evaluation_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Cross-validates `w` without consulting any cache.
pub fn cross_validate(w: &WorkflowSpec, train: &Dataset, plan: &FoldPlan, clock: &dyn Clock, seed: u64) -> EvaluationRecord {
    let key = &w.canonical_key;
    let mut rng = evaluation_rng(seed, key);
    let watch = clock.start(key);
    let mut pred = vec![usize::MAX; train.n_rows()];
    let classifier = w.classifier().to_string();
    for fold in 0..plan.k {
        let test = plan.test_indices(fold);
        if test.is_empty() {
            continue;
        }
        let fold_train = train.subset(&plan.train_indices(fold));
        let outcome = fit_pipeline(w, &fold_train, &mut rng).and_then(|steps| {
            let x = train.features.select(ndarray::Axis(0), &test);
            predict_pipeline(&steps, x.view())
        });
        match outcome {
            Ok(p) => {
                for (&i, c) in test.iter().zip(p) {
                    pred[i] = c;
                }
            }
            Err(e) => {
                return EvaluationRecord {
                    fitness: 0.0,
                    eval_time: watch.elapsed(),
                    failed: true,
                    classifier,
                    failure: Some(e.to_string()),
                }
            }
        }
    }
    let fitness = balanced_accuracy(&train.labels, &pred).unwrap_or(0.0);
    EvaluationRecord {
        fitness,
        eval_time: watch.elapsed(),
        failed: false,
        classifier,
        failure: None,
    }
}

/// Cache-aware evaluation of one workflow.
pub fn evaluate(
    w: &WorkflowSpec,
    train: &Dataset,
    plan: &FoldPlan,
    cache: &EvaluationCache,
    clock: &dyn Clock,
    seed: u64,
) -> EvaluationRecord {
    cache
        .get_or_compute(&w.canonical_key, || cross_validate(w, train, plan, clock, seed))
        .0
}

/// Results shared between runs that use the same data, folds and seed.
/// Equal keys train identically under those three, so a stored record is
/// exactly what a fresh evaluation would compute, measured once.
#[derive(Debug)]
pub struct SharedResults {
    fingerprint: String,
    cache: EvaluationCache,
}

impl SharedResults {
    pub fn new(train: &Dataset, plan: &FoldPlan, seed: u64) -> Arc<Self> {
        Arc::new(Self {
            fingerprint: fingerprint(train, plan, seed),
            cache: EvaluationCache::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

fn fingerprint(train: &Dataset, plan: &FoldPlan, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(train.name.as_bytes());
    for v in train.features.iter() {
        h.update(v.to_le_bytes());
    }
    for &l in &train.labels {
        h.update((l as u64).to_le_bytes());
    }
    for &f in &plan.folds {
        h.update((f as u64).to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Evaluates workflows for one session: owns the training data, fold plan,
/// cache and clock.
#[derive(Debug)]
pub struct Evaluator {
    train: Arc<Dataset>,
    plan: FoldPlan,
    cache: EvaluationCache,
    clock: Arc<dyn Clock>,
    seed: u64,
    shared: Option<Arc<SharedResults>>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub record: EvaluationRecord,
    pub cached: bool,
}

impl Evaluator {
    pub fn new(train: Arc<Dataset>, folds: usize, seed: u64, clock: Arc<dyn Clock>) -> Result<Self, EvalError> {
        let plan = make_fold_plan(&train.labels, folds, seed)?;
        Ok(Self {
            train,
            plan,
            cache: EvaluationCache::new(),
            clock,
            seed,
            shared: None,
            pool: None,
        })
    }

    /// Reuses records across runs with identical data, folds and seed.
    /// Ignored when the fingerprint does not match.
    pub fn with_shared_results(mut self, shared: Arc<SharedResults>) -> Self {
        if shared.fingerprint == fingerprint(&self.train, &self.plan, self.seed) {
            self.shared = Some(shared);
        }
        self
    }

    /// Evaluates batches on `workers` threads (1 = sequential).
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.pool = if workers > 1 {
            rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok().map(Arc::new)
        } else {
            None
        };
        self
    }

    pub fn train(&self) -> &Arc<Dataset> {
        &self.train
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn cache(&self) -> &EvaluationCache {
        &self.cache
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn compute(&self, w: &WorkflowSpec) -> EvaluationRecord {
        let run = || cross_validate(w, &self.train, &self.plan, self.clock.as_ref(), self.seed);
        match &self.shared {
            Some(s) => s.cache.get_or_compute(&w.canonical_key, run).0,
            None => run(),
        }
    }

    pub fn evaluate(&self, w: &WorkflowSpec) -> Outcome {
        let (record, cached) = self.cache.get_or_compute(&w.canonical_key, || self.compute(w));
        Outcome { record, cached }
    }

    /// Evaluates a batch. Keys are resolved in first-occurrence order, so
    /// hit/miss flags do not depend on scheduling; repeats within the batch
    /// are hits.
    pub fn evaluate_batch(&self, ws: &[&WorkflowSpec]) -> Vec<Outcome> {
        let mut seen = HashSet::new();
        let mut fresh: Vec<&WorkflowSpec> = Vec::new();
        for w in ws {
            if seen.insert(w.canonical_key.as_str()) && self.cache.get(&w.canonical_key).is_none() {
                fresh.push(w);
            }
        }
        let computed: Vec<EvaluationRecord> = match &self.pool {
            Some(pool) => pool.install(|| fresh.par_iter().map(|w| self.compute(w)).collect()),
            None => fresh.iter().map(|w| self.compute(w)).collect(),
        };
        let mut pending: HashMap<&str, EvaluationRecord> = fresh
            .iter()
            .map(|w| w.canonical_key.as_str())
            .zip(computed)
            .collect();
        ws.iter()
            .map(|w| {
                let (record, cached) = self.cache.get_or_compute(&w.canonical_key, || {
                    pending.remove(w.canonical_key.as_str()).expect("computed above")
                });
                Outcome { record, cached }
            })
            .collect()
    }
}

/// Per-class counts of each fold; used by tests and diagnostics.
pub fn fold_class_counts(plan: &FoldPlan, labels: &[usize]) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    (0..plan.k)
        .map(|f| {
            let l: Vec<usize> = plan.test_indices(f).iter().map(|&i| labels[i]).collect();
            class_counts(&l, n_classes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::{HyperValue, WorkflowStep};
    use ndarray::Array2;
    use rand::Rng;
    use std::sync::atomic::AtomicUsize;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((n, 2), |(i, _)| if i % 2 == 0 { -4.0 } else { 4.0 } + rng.gen_range(-1.0..1.0));
        let y = (0..n).map(|i| i % 2).collect();
        Dataset::new("blobs", x, y, vec!["a".into(), "b".into()]).unwrap()
    }

    fn wf(alg: &str) -> WorkflowSpec {
        WorkflowSpec::new(vec![WorkflowStep::new(alg)])
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.5);
        let b = balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert!((b - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert_eq!(balanced_accuracy(&[0], &[0, 1]), Err(EvalError::LengthMismatch(1, 2)));
        assert_eq!(balanced_accuracy(&[], &[]), Err(EvalError::Empty));
    }

    #[test]
    fn fold_plan_examples() {
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let plan = make_fold_plan(&labels, 5, 3).unwrap();
        for counts in fold_class_counts(&plan, &labels) {
            assert_eq!(counts, vec![2, 2]);
        }
        assert_eq!(plan, make_fold_plan(&labels, 5, 3).unwrap());
        assert_eq!(make_fold_plan(&labels, 1, 0), Err(EvalError::TooFewFolds(1)));

        let labels = [0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let plan = make_fold_plan(&labels, 5, 0).unwrap();
        let folds_with_zero: HashSet<usize> = (0..3).map(|i| plan.folds[i]).collect();
        assert_eq!(folds_with_zero.len(), 3);
    }

    #[test]
    fn cache_hit_skips_fitting() {
        let data = Arc::new(blobs(60, 1));
        let ev = Evaluator::new(data, 5, 7, Arc::new(FakeClock::constant(0.25))).unwrap();
        let w = wf("gaussianNB");
        let a = ev.evaluate(&w);
        let b = ev.evaluate(&w);
        assert!(!a.cached && b.cached);
        assert_eq!(a.record, b.record);
        assert_eq!((ev.cache().hits(), ev.cache().misses()), (1, 1));
        assert_eq!(a.record.eval_time, 0.25);
    }

    #[test]
    fn separable_blobs_score_high_and_failures_score_zero() {
        let data = blobs(100, 2);
        let plan = make_fold_plan(&data.labels, 5, 0).unwrap();
        let cache = EvaluationCache::new();
        let r = evaluate(&wf("gaussianNB"), &data, &plan, &cache, &WallClock, 0);
        assert!(r.fitness >= 0.95 && !r.failed);
        let r = evaluate(&wf("multinomialNB"), &data, &plan, &cache, &WallClock, 0);
        assert!(r.failed);
        assert_eq!(r.fitness, 0.0);
        assert_eq!(r.classifier, "multinomialNB");
    }

    #[test]
    fn singular_lda_scores_zero() {
        let base = blobs(60, 3);
        let col = base.features.column(0).to_owned();
        let x = ndarray::stack(ndarray::Axis(1), &[col.view(), col.view()]).unwrap();
        let data = Dataset::new("dup", x, base.labels.clone(), base.class_names.clone()).unwrap();
        let plan = make_fold_plan(&data.labels, 5, 0).unwrap();
        let r = evaluate(&wf("lda"), &data, &plan, &EvaluationCache::new(), &WallClock, 0);
        assert!(r.failed);
        assert_eq!(r.fitness, 0.0);
    }

    #[test]
    fn scripted_clock_times_are_recorded_exactly() {
        let data = Arc::new(blobs(40, 4));
        let ev = Evaluator::new(data, 5, 0, Arc::new(FakeClock::scripted([1.5, 2.5]))).unwrap();
        let a = ev.evaluate(&wf("gaussianNB")).record.eval_time;
        let b = ev.evaluate(&wf("kNN")).record.eval_time;
        let c = ev.evaluate(&wf("lda")).record.eval_time;
        assert_eq!((a, b, c), (1.5, 2.5, 2.5));
    }

    #[test]
    fn concurrent_misses_compute_once() {
        let cache = Arc::new(EvaluationCache::new());
        let calls = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let cache = cache.clone();
                let calls = calls.clone();
                s.spawn(move || {
                    cache.get_or_compute("k", || {
                        calls.fetch_add(1, Ordering::SeqCst);
                        std::thread::sleep(std::time::Duration::from_millis(20));
                        EvaluationRecord {
                            fitness: 0.5,
                            eval_time: 1.0,
                            failed: false,
                            classifier: "x".into(),
                            failure: None,
                        }
                    });
                });
            }
        });
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(cache.hits() + cache.misses(), 8);
        assert_eq!(cache.misses(), 1);
    }

    #[test]
    fn batch_flags_are_schedule_independent() {
        let data = Arc::new(blobs(40, 5));
        let a = wf("gaussianNB");
        let b = WorkflowSpec::new(vec![WorkflowStep::new("kNN").with("n_neighbors", HyperValue::Integer(3))]);
        let batch = [&a, &b, &a];
        for workers in [1, 3] {
            let ev = Evaluator::new(data.clone(), 5, 0, Arc::new(FakeClock::constant(1.0)))
                .unwrap()
                .with_workers(workers);
            let out = ev.evaluate_batch(&batch);
            let flags: Vec<bool> = out.iter().map(|o| o.cached).collect();
            assert_eq!(flags, vec![false, false, true]);
            assert_eq!(out[0].record, out[2].record);
        }
    }

    #[test]
    fn shared_results_match_fresh_evaluation() {
        let data = Arc::new(blobs(40, 6));
        let clock: Arc<dyn Clock> = Arc::new(FakeClock::constant(1.0));
        let plain = Evaluator::new(data.clone(), 5, 9, clock.clone()).unwrap();
        let shared = SharedResults::new(&data, plain.plan(), 9);
        let one = Evaluator::new(data.clone(), 5, 9, clock.clone()).unwrap().with_shared_results(shared.clone());
        let two = Evaluator::new(data.clone(), 5, 9, clock).unwrap().with_shared_results(shared.clone());
        let w = wf("mlpClassifier");
        let fresh = plain.evaluate(&w).record;
        assert_eq!(one.evaluate(&w).record, fresh);
        let again = two.evaluate(&w);
        assert!(!again.cached);
        assert_eq!(again.record, fresh);
        assert_eq!(shared.len(), 1);
    }
}
