//! The session state machine: initial population, generations, interaction
//! pauses, grammar pruning with population repair, and termination.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{Clock, EvalError, EvaluationRecord, Evaluator, SharedResults, WallClock};
use crate::grammar::{Grammar, HyperparamValueId, Violation};
use crate::interaction::Thresholds;
use crate::mlcatalog::Dataset;
use crate::search::{compare_records, replace, tournament_select, Individual, SearchError, SearchSpace};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("session is {actual}, expected {expected}")]
    WrongStatus { expected: Status, actual: Status },
    #[error("illegal removal batch: {0:?}")]
    IllegalRemovals(Vec<Violation>),
    #[error("Continue needs at least one generation")]
    InvalidDecision,
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("run log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub population_size: usize,
    pub crossover_prob: f64,
    pub mutation_prob: f64,
    pub max_derivations: usize,
    pub max_generations: usize,
    pub max_interactions: usize,
    pub first_interaction_generation: usize,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            population_size: 100,
            crossover_prob: 0.8,
            mutation_prob: 0.2,
            max_derivations: 13,
            max_generations: 50,
            max_interactions: 10,
            first_interaction_generation: 15,
            cv_folds: 5,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::InvalidConfig(m.to_string()));
        if self.population_size < 2 {
            return bad("population_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.crossover_prob) || !(0.0..=1.0).contains(&self.mutation_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.max_interactions > 0 && self.first_interaction_generation > self.max_generations {
            return bad("first_interaction_generation exceeds max_generations");
        }
        if self.max_interactions > 0 && self.first_interaction_generation == 0 {
            return bad("first_interaction_generation must be at least 1");
        }
        if self.cv_folds < 2 {
            return bad("cv_folds must be at least 2");
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), EngineError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, EngineError> {
            v.parse()
                .map_err(|_| EngineError::InvalidConfig(format!("bad value `{v}` for {key}")))
        }
        match key {
            "population_size" => self.population_size = num(key, value)?,
            "crossover_prob" => self.crossover_prob = num(key, value)?,
            "mutation_prob" => self.mutation_prob = num(key, value)?,
            "max_derivations" => self.max_derivations = num(key, value)?,
            "max_generations" => self.max_generations = num(key, value)?,
            "max_interactions" => self.max_interactions = num(key, value)?,
            "first_interaction_generation" => self.first_interaction_generation = num(key, value)?,
            "cv_folds" => self.cv_folds = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(EngineError::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Reads `key = value` lines on top of the defaults; `#` starts a comment.
    pub fn from_kv(text: &str) -> Result<Self, EngineError> {
        let mut c = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EngineError::InvalidConfig(format!("expected key=value, got `{line}`")))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Running,
    AwaitingFeedback,
    Finished,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Decision {
    Continue { generations_until_next: usize },
    Stop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    #[serde(default)]
    pub remove_algorithms: Vec<String>,
    #[serde(default)]
    pub remove_hyperparameter_values: Vec<HyperparamValueId>,
    #[serde(default)]
    pub thresholds_used: Thresholds,
    pub decision: Decision,
}

impl Feedback {
    /// No removals, resume for `generations` more.
    pub fn keep_going(generations: usize) -> Self {
        Self {
            remove_algorithms: Vec::new(),
            remove_hyperparameter_values: Vec::new(),
            thresholds_used: Thresholds::default(),
            decision: Decision::Continue {
                generations_until_next: generations,
            },
        }
    }

    pub fn is_noop(&self) -> bool {
        self.remove_algorithms.is_empty() && self.remove_hyperparameter_values.is_empty()
    }
}

/// One fresh evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub generation: usize,
    pub individual: Individual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub generation: usize,
    pub thresholds: Thresholds,
    pub removed_algorithms: Vec<String>,
    pub removed_hyperparameter_values: Vec<HyperparamValueId>,
    pub decision: Decision,
    pub wall_time_spent_seconds: Option<f64>,
    pub replaced_individuals: usize,
}

/// Lines of the JSONL run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Evaluation {
        generation: usize,
        canonical_key: String,
        fitness: f64,
        eval_time: f64,
        classifier: String,
        cached: bool,
    },
    Interaction(InteractionRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub removed_algorithms: Vec<String>,
    pub removed_hyperparameter_values: Vec<HyperparamValueId>,
    pub replaced_individuals: usize,
    pub status: Status,
}

#[derive(Clone, Debug)]
pub struct SessionResult {
    pub archive: Individual,
    pub eval_log: Vec<LogEntry>,
    pub cumulative_eval_time: f64,
    /// Cumulative evaluation time at the end of each generation; index 0
    /// is the initial population.
    pub timeline: Vec<f64>,
    pub interactions: Vec<InteractionRecord>,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

/// How a session evaluates: clock, worker threads, optional cross-run
/// result sharing.
#[derive(Clone, Debug)]
pub struct StartOptions {
    pub clock: Arc<dyn Clock>,
    pub workers: usize,
    pub shared: Option<Arc<SharedResults>>,
}

impl Default for StartOptions {
    fn default() -> Self {
        Self {
            clock: Arc::new(WallClock),
            workers: 1,
            shared: None,
        }
    }
}

impl StartOptions {
    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            ..Self::default()
        }
    }
}

pub struct Session {
    config: EngineConfig,
    grammar: Arc<Grammar>,
    space: SearchSpace,
    evaluator: Evaluator,
    rng: ChaCha8Rng,
    population: Vec<Individual>,
    archive: Individual,
    generation: usize,
    interactions_used: usize,
    next_interaction_generation: Option<usize>,
    eval_log: Vec<LogEntry>,
    snapshot_start: usize,
    cumulative_eval_time: f64,
    timeline: Vec<f64>,
    interactions: Vec<InteractionRecord>,
    original_algorithm_count: usize,
    status: Status,
    run_log: Option<Box<dyn Write + Send>>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("generation", &self.generation)
            .field("status", &self.status)
            .field("archive", &self.archive.workflow.canonical_key)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn start(config: EngineConfig, grammar: Grammar, train: Arc<Dataset>, options: StartOptions) -> Result<Self, EngineError> {
        Self::start_logged(config, grammar, train, options, None)
    }

    /// Like [`Session::start`], writing every evaluation and interaction
    /// as one JSON line to `run_log`.
    pub fn start_logged(
        config: EngineConfig,
        grammar: Grammar,
        train: Arc<Dataset>,
        options: StartOptions,
        run_log: Option<Box<dyn Write + Send>>,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let violations = grammar.validate();
        if !violations.is_empty() {
            return Err(EngineError::IllegalRemovals(violations));
        }
        let grammar = Arc::new(grammar);
        let space = SearchSpace::new(grammar.clone(), config.max_derivations)?;
        let mut evaluator = Evaluator::new(train, config.cv_folds, config.seed, options.clock)?.with_workers(options.workers);
        if let Some(shared) = options.shared {
            evaluator = evaluator.with_shared_results(shared);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let population: Vec<Individual> = (0..config.population_size)
            .map(|_| space.random_individual(&mut rng))
            .collect();
        let original_algorithm_count = grammar.algorithms().len();
        let mut s = Self {
            next_interaction_generation: (config.max_interactions > 0).then_some(config.first_interaction_generation),
            status: if config.max_generations == 0 {
                Status::Finished
            } else {
                Status::Running
            },
            archive: population[0].clone(),
            config,
            grammar,
            space,
            evaluator,
            rng,
            population: Vec::new(),
            generation: 0,
            interactions_used: 0,
            eval_log: Vec::new(),
            snapshot_start: 0,
            cumulative_eval_time: 0.0,
            timeline: Vec::new(),
            interactions: Vec::new(),
            original_algorithm_count,
            run_log,
        };
        let mut population = population;
        s.evaluate_all(&mut population)?;
        s.archive = population[0].clone();
        for ind in &population {
            s.offer_archive(ind);
        }
        s.population = population;
        s.timeline.push(s.cumulative_eval_time);
        Ok(s)
    }

    /// Evaluates through the cache, logs, and adds fresh time.
    fn evaluate_all(&mut self, individuals: &mut [Individual]) -> Result<(), EngineError> {
        let specs: Vec<&crate::search::WorkflowSpec> = individuals.iter().map(|i| &i.workflow).collect();
        let outcomes = self.evaluator.evaluate_batch(&specs);
        for (ind, out) in individuals.iter_mut().zip(outcomes) {
            ind.evaluation = Some(out.record.clone());
            if let Some(log) = self.run_log.as_mut() {
                let ev = RunEvent::Evaluation {
                    generation: self.generation,
                    canonical_key: ind.workflow.canonical_key.clone(),
                    fitness: out.record.fitness,
                    eval_time: out.record.eval_time,
                    classifier: out.record.classifier.clone(),
                    cached: out.cached,
                };
                serde_json::to_writer(&mut *log, &ev).map_err(std::io::Error::from)?;
                log.write_all(b"\n")?;
            }
            if !out.cached {
                self.cumulative_eval_time += out.record.eval_time;
                self.eval_log.push(LogEntry {
                    generation: self.generation,
                    individual: ind.clone(),
                });
            }
        }
        Ok(())
    }

    fn offer_archive(&mut self, ind: &Individual) {
        let (Some(new), Some(old)) = (&ind.evaluation, &self.archive.evaluation) else {
            return;
        };
        if compare_records(new, old).is_lt() {
            self.archive = ind.clone();
        }
    }

    fn expect(&self, expected: Status) -> Result<(), EngineError> {
        if self.status == expected {
            Ok(())
        } else {
            Err(EngineError::WrongStatus {
                expected,
                actual: self.status,
            })
        }
    }

    /// Breeds, evaluates and replaces one generation.
    pub fn step_generation(&mut self) -> Result<Status, EngineError> {
        self.expect(Status::Running)?;
        let n = self.config.population_size;
        let mut offspring: Vec<Individual> = Vec::with_capacity(n);
        while offspring.len() < n {
            let p1 = tournament_select(&self.population, &mut self.rng)?.clone();
            let p2 = tournament_select(&self.population, &mut self.rng)?.clone();
            let (c1, c2) = if self.rng.gen::<f64>() < self.config.crossover_prob {
                self.space.crossover(&p1, &p2, &mut self.rng)
            } else {
                (Individual::from_tree(p1.tree), Individual::from_tree(p2.tree))
            };
            for child in [c1, c2] {
                if offspring.len() == n {
                    break;
                }
                let child = if self.rng.gen::<f64>() < self.config.mutation_prob {
                    self.space.mutate(&child, &mut self.rng)
                } else {
                    child
                };
                offspring.push(child);
            }
        }
        self.generation += 1;
        self.evaluate_all(&mut offspring)?;
        for ind in &offspring {
            self.offer_archive(ind);
        }
        self.population = replace(&self.population, offspring)?;
        self.timeline.push(self.cumulative_eval_time);
        self.status = if self.generation >= self.config.max_generations {
            Status::Finished
        } else if self.next_interaction_generation == Some(self.generation)
            && self.interactions_used < self.config.max_interactions
        {
            Status::AwaitingFeedback
        } else {
            Status::Running
        };
        Ok(self.status)
    }

    /// Steps until the session pauses for feedback or finishes.
    pub fn run_until_pause(&mut self) -> Result<Status, EngineError> {
        while self.status == Status::Running {
            self.step_generation()?;
        }
        Ok(self.status)
    }

    /// Prunes the grammar, repairs the population and resumes or stops.
    /// An illegal batch leaves the session untouched.
    pub fn apply_feedback(&mut self, feedback: &Feedback, wall_time: Option<f64>) -> Result<FeedbackOutcome, EngineError> {
        self.expect(Status::AwaitingFeedback)?;
        if matches!(
            feedback.decision,
            Decision::Continue {
                generations_until_next: 0
            }
        ) {
            return Err(EngineError::InvalidDecision);
        }
        let pruned = if feedback.is_noop() {
            None
        } else {
            let g = self
                .grammar
                .apply_removals(&feedback.remove_algorithms, &feedback.remove_hyperparameter_values)
                .map_err(EngineError::IllegalRemovals)?;
            Some(Arc::new(g))
        };
        self.snapshot_start = self.eval_log.len();
        let mut replaced = 0;
        if let Some(g) = pruned {
            self.space = SearchSpace::new(g.clone(), self.config.max_derivations)?;
            self.grammar = g;
            let invalid: Vec<usize> = (0..self.population.len())
                .filter(|&i| !self.space.is_valid(&self.population[i].tree))
                .collect();
            replaced = invalid.len();
            let mut fresh: Vec<Individual> = invalid
                .iter()
                .map(|_| self.space.random_individual(&mut self.rng))
                .collect();
            self.evaluate_all(&mut fresh)?;
            for (slot, ind) in invalid.into_iter().zip(fresh) {
                self.offer_archive(&ind);
                self.population[slot] = ind;
            }
        }
        self.interactions_used += 1;
        let record = InteractionRecord {
            generation: self.generation,
            thresholds: feedback.thresholds_used,
            removed_algorithms: feedback.remove_algorithms.clone(),
            removed_hyperparameter_values: feedback.remove_hyperparameter_values.clone(),
            decision: feedback.decision.clone(),
            wall_time_spent_seconds: wall_time,
            replaced_individuals: replaced,
        };
        if let Some(log) = self.run_log.as_mut() {
            serde_json::to_writer(&mut *log, &RunEvent::Interaction(record.clone())).map_err(std::io::Error::from)?;
            log.write_all(b"\n")?;
        }
        self.interactions.push(record);
        match feedback.decision {
            Decision::Stop => {
                self.status = Status::Finished;
                self.next_interaction_generation = None;
            }
            Decision::Continue {
                generations_until_next,
            } => {
                self.next_interaction_generation = (self.interactions_used < self.config.max_interactions)
                    .then(|| (self.generation + generations_until_next).min(self.config.max_generations));
                self.status = Status::Running;
            }
        }
        self.flush_log()?;
        Ok(FeedbackOutcome {
            removed_algorithms: feedback.remove_algorithms.clone(),
            removed_hyperparameter_values: feedback.remove_hyperparameter_values.clone(),
            replaced_individuals: replaced,
            status: self.status,
        })
    }

    fn flush_log(&mut self) -> Result<(), EngineError> {
        if let Some(log) = self.run_log.as_mut() {
            log.flush()?;
        }
        Ok(())
    }

    pub fn result(&mut self) -> Result<SessionResult, EngineError> {
        self.expect(Status::Finished)?;
        self.flush_log()?;
        Ok(SessionResult {
            archive: self.archive.clone(),
            eval_log: self.eval_log.clone(),
            cumulative_eval_time: self.cumulative_eval_time,
            timeline: self.timeline.clone(),
            interactions: self.interactions.clone(),
            cache_hits: self.evaluator.cache().hits(),
            cache_misses: self.evaluator.cache().misses(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn population(&self) -> &[Individual] {
        &self.population
    }

    pub fn archive(&self) -> &Individual {
        &self.archive
    }

    pub fn archive_record(&self) -> &EvaluationRecord {
        self.archive.evaluation.as_ref().expect("archive is evaluated")
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn interactions_used(&self) -> usize {
        self.interactions_used
    }

    pub fn next_interaction_generation(&self) -> Option<usize> {
        self.next_interaction_generation
    }

    pub fn eval_log(&self) -> &[LogEntry] {
        &self.eval_log
    }

    /// Evaluations made since the previous interaction (or since start).
    pub fn evaluations_since_interaction(&self) -> &[LogEntry] {
        &self.eval_log[self.snapshot_start..]
    }

    pub fn cumulative_eval_time(&self) -> f64 {
        self.cumulative_eval_time
    }

    pub fn timeline(&self) -> &[f64] {
        &self.timeline
    }

    pub fn interactions(&self) -> &[InteractionRecord] {
        &self.interactions
    }

    pub fn original_algorithm_count(&self) -> usize {
        self.original_algorithm_count
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn cache_counters(&self) -> (u64, u64) {
        (self.evaluator.cache().hits(), self.evaluator.cache().misses())
    }

    pub fn train(&self) -> &Arc<Dataset> {
        self.evaluator.train()
    }
}
