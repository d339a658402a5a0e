//! What a user sees at a pause: recent evaluations, per-symbol statistics,
//! and the threshold split into a best and a worst region whose exclusive
//! symbols become removal candidates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Session, Status};
use crate::evaluation::EvaluationRecord;
use crate::grammar::{Grammar, HyperparamValueId};
use crate::search::{compare_records, Individual, WorkflowSpec};

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("t_acc must lie in [0, 1], got {0}")]
    Accuracy(f64),
    #[error("t_time must be a non-negative number of seconds, got {0}")]
    Time(f64),
}

/// `None` disables an axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_acc: Option<f64>,
    pub t_time: Option<f64>,
}

impl Thresholds {
    pub fn new(t_acc: Option<f64>, t_time: Option<f64>) -> Result<Self, ThresholdError> {
        let th = Self { t_acc, t_time };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<(), ThresholdError> {
        if let Some(a) = self.t_acc {
            if !(0.0..=1.0).contains(&a) {
                return Err(ThresholdError::Accuracy(a));
            }
        }
        if let Some(t) = self.t_time {
            if t.is_nan() || t < 0.0 {
                return Err(ThresholdError::Time(t));
            }
        }
        Ok(())
    }

    /// Strictly above the accuracy bar and strictly below the time bar.
    pub fn admits(&self, r: &EvaluationRecord) -> bool {
        self.t_acc.is_none_or(|a| r.fitness > a) && self.t_time.is_none_or(|t| r.eval_time < t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotIndividual {
    pub workflow: WorkflowSpec,
    pub record: EvaluationRecord,
    pub generation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Champion {
    pub workflow: WorkflowSpec,
    pub record: EvaluationRecord,
}

impl Champion {
    fn of(ind: &Individual) -> Self {
        Self {
            workflow: ind.workflow.clone(),
            record: ind.evaluation.clone().expect("evaluated individual"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SymbolKind {
    Preprocessor,
    Classifier,
    HyperparamValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolStats {
    /// Algorithm id, or `algorithm::hyperparameter=value`.
    pub symbol: String,
    pub kind: SymbolKind,
    pub occurrences: usize,
    pub max_eval_time: f64,
    pub mean_eval_time: f64,
    pub max_fitness: f64,
}

/// Indices into the snapshot's individuals.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionPartition {
    pub r_best: Vec<usize>,
    pub r_worst: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Candidates {
    pub algorithms: BTreeSet<String>,
    pub hyperparameter_values: BTreeSet<HyperparamValueId>,
}

impl Candidates {
    pub fn is_empty(&self) -> bool {
        self.algorithms.is_empty() && self.hyperparameter_values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub interactions_left: usize,
    pub generations_left: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergencePoint {
    pub generation: usize,
    pub cumulative_eval_time: f64,
    pub baseline_cumulative_eval_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSnapshot {
    pub generation: usize,
    pub individuals: Vec<SnapshotIndividual>,
    /// Best of the live population.
    pub best_current: Champion,
    /// The archive.
    pub best_global: Champion,
    pub stats: Vec<SymbolStats>,
    pub budget: Budget,
    pub time_divergence: Vec<DivergencePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<RegionPartition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Candidates>,
}

impl InteractionSnapshot {
    /// Fills in the partition and the candidates for `th`.
    pub fn with_thresholds(mut self, th: Thresholds, grammar: &Grammar) -> Self {
        let part = partition(&self.individuals, &th);
        self.candidates = Some(removal_candidates(&self.individuals, &part, grammar));
        self.partition = Some(part);
        self.thresholds = Some(th);
        self
    }
}

pub fn build_snapshot(s: &Session, baseline_timeline: Option<&[f64]>) -> Result<InteractionSnapshot, EngineError> {
    if s.status() != Status::AwaitingFeedback {
        return Err(EngineError::WrongStatus {
            expected: Status::AwaitingFeedback,
            actual: s.status(),
        });
    }
    let individuals: Vec<SnapshotIndividual> = s
        .evaluations_since_interaction()
        .iter()
        .map(|e| SnapshotIndividual {
            workflow: e.individual.workflow.clone(),
            record: e.individual.evaluation.clone().expect("logged individuals are evaluated"),
            generation: e.generation,
        })
        .collect();
    let best_current = s
        .population()
        .iter()
        .min_by(|a, b| compare_records(a.evaluation.as_ref().unwrap(), b.evaluation.as_ref().unwrap()))
        .expect("non-empty population");
    let cfg = s.config();
    let time_divergence = s
        .timeline()
        .iter()
        .enumerate()
        .map(|(g, &t)| DivergencePoint {
            generation: g,
            cumulative_eval_time: t,
            baseline_cumulative_eval_time: baseline_timeline.and_then(|b| b.get(g).copied()),
        })
        .collect();
    Ok(InteractionSnapshot {
        generation: s.generation(),
        stats: symbol_stats(&individuals),
        individuals,
        best_current: Champion::of(best_current),
        best_global: Champion::of(s.archive()),
        budget: Budget {
            interactions_left: cfg.max_interactions.saturating_sub(s.interactions_used()),
            generations_left: cfg.max_generations.saturating_sub(s.generation()),
        },
        time_divergence,
        thresholds: None,
        partition: None,
        candidates: None,
    })
}

pub fn partition(individuals: &[SnapshotIndividual], th: &Thresholds) -> RegionPartition {
    let (r_best, r_worst) = (0..individuals.len()).partition(|&i| th.admits(&individuals[i].record));
    RegionPartition { r_best, r_worst }
}

/// Symbols present in some worst-region workflow and in no best-region
/// workflow, restricted to what the grammar can lose.
pub fn removal_candidates(individuals: &[SnapshotIndividual], part: &RegionPartition, grammar: &Grammar) -> Candidates {
    let collect = |ids: &[usize]| {
        let mut algs = BTreeSet::new();
        let mut vals = BTreeSet::new();
        for &i in ids {
            let w = &individuals[i].workflow;
            algs.extend(w.algorithms().into_iter().map(str::to_string));
            vals.extend(w.categorical_values());
        }
        (algs, vals)
    };
    let (best_algs, best_vals) = collect(&part.r_best);
    let (worst_algs, worst_vals) = collect(&part.r_worst);
    let (removable_algs, removable_vals) = grammar.removable_symbols();
    Candidates {
        algorithms: worst_algs
            .into_iter()
            .filter(|a| !best_algs.contains(a) && removable_algs.contains(a))
            .collect(),
        hyperparameter_values: worst_vals
            .into_iter()
            .filter(|v| !best_vals.contains(v) && removable_vals.contains(v))
            .collect(),
    }
}

/// Occurrences of each algorithm across the given individuals.
pub fn algorithm_counts(individuals: &[SnapshotIndividual], ids: &[usize]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for &i in ids {
        for a in individuals[i].workflow.algorithms() {
            *counts.entry(a.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

struct Acc {
    kind: SymbolKind,
    n: usize,
    max_time: f64,
    sum_time: f64,
    max_fitness: f64,
}

/// Statistics for every algorithm and categorical value in the snapshot,
/// sorted by kind then symbol.
pub fn symbol_stats(individuals: &[SnapshotIndividual]) -> Vec<SymbolStats> {
    let mut acc: BTreeMap<(SymbolKind, String), Acc> = BTreeMap::new();
    for ind in individuals {
        let w = &ind.workflow;
        let mut symbols: Vec<(SymbolKind, String)> = w
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let kind = if i + 1 == w.steps.len() {
                    SymbolKind::Classifier
                } else {
                    SymbolKind::Preprocessor
                };
                (kind, s.algorithm.clone())
            })
            .collect();
        symbols.extend(
            w.categorical_values()
                .into_iter()
                .map(|v| (SymbolKind::HyperparamValue, v.to_string())),
        );
        for key in symbols {
            let kind = key.0;
            let a = acc.entry(key).or_insert(Acc {
                kind,
                n: 0,
                max_time: f64::NEG_INFINITY,
                sum_time: 0.0,
                max_fitness: f64::NEG_INFINITY,
            });
            a.n += 1;
            a.max_time = a.max_time.max(ind.record.eval_time);
            a.sum_time += ind.record.eval_time;
            a.max_fitness = a.max_fitness.max(ind.record.fitness);
        }
    }
    acc.into_iter()
        .map(|((_, symbol), a)| SymbolStats {
            symbol,
            kind: a.kind,
            occurrences: a.n,
            max_eval_time: a.max_time,
            mean_eval_time: a.sum_time / a.n as f64,
            max_fitness: a.max_fitness,
        })
        .collect()
}
