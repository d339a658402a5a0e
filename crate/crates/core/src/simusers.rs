//! Scripted users: thresholds derived from snapshot statistics and a fixed
//! removal policy, driven over a two-pause schedule.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::engine::{Decision, EngineConfig, EngineError, Feedback, Session, SessionResult, StartOptions, Status};
use crate::grammar::{Grammar, HyperparamValueId};
use crate::interaction::{algorithm_counts, build_snapshot, partition, removal_candidates, InteractionSnapshot, Thresholds};
use crate::mlcatalog::Dataset;

pub const FITNESS_CONSTANTS: [f64; 3] = [0.0, 0.8, 0.9];
pub const TIME_CONSTANTS: [f64; 3] = [0.0, 0.5, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("bad profile id `{0}`")]
    BadId(String),
    #[error("fitness constant {0} not in {{0, 0.8, 0.9}}")]
    FitnessConstant(f64),
    #[error("time constant {0} not in {{0, 0.5, 1}}")]
    TimeConstant(f64),
    #[error("a profile needs at least one non-zero constant")]
    Unconstrained,
    #[error("snapshot has no individuals")]
    EmptySnapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgorithmStrategy {
    /// The single most frequent worst-region candidate.
    MostFrequentOne,
    /// Up to a third of the original algorithm count.
    UpToOneThird,
}

impl AlgorithmStrategy {
    fn label(self) -> &'static str {
        match self {
            AlgorithmStrategy::MostFrequentOne => "a1",
            AlgorithmStrategy::UpToOneThird => "a12",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "a1" | "aOne" => Some(AlgorithmStrategy::MostFrequentOne),
            "a12" | "aThird" => Some(AlgorithmStrategy::UpToOneThird),
            _ => None,
        }
    }

    /// How many algorithms may go in one interaction.
    pub fn quota(self, original_algorithms: usize) -> usize {
        match self {
            AlgorithmStrategy::MostFrequentOne => 1,
            AlgorithmStrategy::UpToOneThird => original_algorithms.div_ceil(3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Profile {
    fitness_constant: f64,
    time_constant: f64,
    strategy: AlgorithmStrategy,
}

impl Profile {
    pub fn new(fitness_constant: f64, time_constant: f64, strategy: AlgorithmStrategy) -> Result<Self, ProfileError> {
        if !FITNESS_CONSTANTS.contains(&fitness_constant) {
            return Err(ProfileError::FitnessConstant(fitness_constant));
        }
        if !TIME_CONSTANTS.contains(&time_constant) {
            return Err(ProfileError::TimeConstant(time_constant));
        }
        if fitness_constant == 0.0 && time_constant == 0.0 {
            return Err(ProfileError::Unconstrained);
        }
        Ok(Self {
            fitness_constant,
            time_constant,
            strategy,
        })
    }

    pub fn fitness_constant(&self) -> f64 {
        self.fitness_constant
    }

    pub fn time_constant(&self) -> f64 {
        self.time_constant
    }

    pub fn strategy(&self) -> AlgorithmStrategy {
        self.strategy
    }

    pub fn id(&self) -> String {
        self.to_string()
    }

    /// The 16 legal combinations, fitness-major.
    pub fn suite() -> Vec<Profile> {
        let mut out = Vec::with_capacity(16);
        for x in FITNESS_CONSTANTS {
            for y in TIME_CONSTANTS {
                for z in [AlgorithmStrategy::MostFrequentOne, AlgorithmStrategy::UpToOneThird] {
                    if let Ok(p) = Profile::new(x, y, z) {
                        out.push(p);
                    }
                }
            }
        }
        out
    }

    pub fn compute_thresholds(&self, snapshot: &InteractionSnapshot) -> Result<Thresholds, ProfileError> {
        let n = snapshot.individuals.len();
        if n == 0 {
            return Err(ProfileError::EmptySnapshot);
        }
        let t_acc = (self.fitness_constant > 0.0).then(|| {
            let mean = snapshot.individuals.iter().map(|i| i.record.fitness).sum::<f64>() / n as f64;
            (self.fitness_constant * mean).clamp(0.0, 1.0)
        });
        let t_time = (self.time_constant > 0.0).then(|| {
            let times: Vec<f64> = snapshot.individuals.iter().map(|i| i.record.eval_time).collect();
            self.time_constant * median(times)
        });
        Ok(Thresholds { t_acc, t_time })
    }

    /// Builds the feedback for one pause. `next_gap` is the number of
    /// generations until the next pause, or `None` to stop.
    pub fn decide(
        &self,
        snapshot: &InteractionSnapshot,
        grammar: &Grammar,
        original_algorithms: usize,
        next_gap: Option<usize>,
    ) -> Result<Feedback, ProfileError> {
        let th = self.compute_thresholds(snapshot)?;
        let part = partition(&snapshot.individuals, &th);
        let candidates = removal_candidates(&snapshot.individuals, &part, grammar);
        let counts = algorithm_counts(&snapshot.individuals, &part.r_worst);
        let mut ranked: Vec<(usize, String)> = candidates
            .algorithms
            .into_iter()
            .map(|a| (counts.get(&a).copied().unwrap_or(0), a))
            .collect();
        ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        ranked.truncate(self.strategy.quota(original_algorithms));

        let mut g = grammar.clone();
        let mut algorithms = Vec::new();
        for (_, a) in ranked {
            if let Ok(next) = g.remove_algorithm(&a) {
                g = next;
                algorithms.push(a);
            }
        }
        let mut values: Vec<HyperparamValueId> = Vec::new();
        for v in candidates.hyperparameter_values {
            if let Ok(next) = g.remove_hyperparameter_value(&v) {
                g = next;
                values.push(v);
            }
        }
        Ok(Feedback {
            remove_algorithms: algorithms,
            remove_hyperparameter_values: values,
            thresholds_used: th,
            decision: match next_gap {
                Some(g) if g > 0 => Decision::Continue {
                    generations_until_next: g,
                },
                _ => Decision::Stop,
            },
        })
    }
}

/// Mean of the middle two for even counts.
pub fn median(mut xs: Vec<f64>) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.fitness_constant > 0.0 {
            parts.push(format!("f{}", self.fitness_constant));
        }
        if self.time_constant > 0.0 {
            parts.push(format!("t{}", self.time_constant));
        }
        parts.push(self.strategy.label().to_string());
        f.write_str(&parts.join("_"))
    }
}

impl FromStr for Profile {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProfileError::BadId(s.to_string());
        let s = s.trim().trim_start_matches('<').trim_end_matches('>');
        let (mut x, mut y, mut z) = (None, None, None);
        for part in s.split('_') {
            if let Some(strategy) = AlgorithmStrategy::parse(part) {
                z.get_or_insert(strategy);
                continue;
            }
            let slot = match part.chars().next() {
                Some('f') => &mut x,
                Some('t') => &mut y,
                _ => return Err(bad()),
            };
            if slot.is_some() {
                return Err(bad());
            }
            *slot = Some(part[1..].parse::<f64>().map_err(|_| bad())?);
        }
        Profile::new(x.unwrap_or(0.0), y.unwrap_or(0.0), z.ok_or_else(bad)?)
    }
}

impl Serialize for Profile {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Profile {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// Two pauses splitting a run in 15:15:20 proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub first: usize,
    pub gap: usize,
    pub total: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            first: 15,
            gap: 15,
            total: 50,
        }
    }
}

impl Schedule {
    /// Keeps the 15:15:20 ratio for a shorter run; 30 generations gives 9/9/12.
    pub fn scaled(total: usize) -> Self {
        let first = (total as f64 * 0.3).round() as usize;
        Self {
            first,
            gap: first,
            total,
        }
    }

    pub fn apply(&self, config: &EngineConfig) -> EngineConfig {
        EngineConfig {
            max_generations: self.total,
            first_interaction_generation: self.first,
            max_interactions: 2,
            ..config.clone()
        }
    }

    /// The same run length with interaction switched off.
    pub fn baseline(&self, config: &EngineConfig) -> EngineConfig {
        EngineConfig {
            max_interactions: 0,
            ..self.apply(config)
        }
    }

    /// Cumulative evaluation time after the first pause.
    pub fn window_time(&self, timeline: &[f64]) -> f64 {
        let last = *timeline.last().unwrap_or(&0.0);
        last - timeline.get(self.first).copied().unwrap_or(last)
    }
}

pub fn speedup(baseline_window: f64, interactive_window: f64) -> f64 {
    baseline_window / interactive_window
}

#[derive(Debug)]
pub struct SimulatedRun {
    pub result: SessionResult,
    pub window_eval_time: f64,
    pub feedback: Vec<Feedback>,
}

/// Runs one session, letting `profile` answer every pause.
pub fn run_simulated(
    profile: &Profile,
    config: &EngineConfig,
    grammar: Grammar,
    train: Arc<Dataset>,
    schedule: Schedule,
    options: StartOptions,
    run_log: Option<Box<dyn Write + Send>>,
) -> Result<SimulatedRun, EngineError> {
    let mut s = Session::start_logged(schedule.apply(config), grammar, train, options, run_log)?;
    let mut feedback = Vec::new();
    while s.run_until_pause()? == Status::AwaitingFeedback {
        let snap = build_snapshot(&s, None)?;
        let remaining = schedule.total - s.generation();
        let gap = if s.interactions_used() == 0 {
            schedule.gap
        } else {
            remaining
        };
        let fb = profile
            .decide(&snap, s.grammar(), s.original_algorithm_count(), Some(gap.min(remaining)))
            .map_err(|e| EngineError::InvalidConfig(e.to_string()))?;
        s.apply_feedback(&fb, None)?;
        feedback.push(fb);
    }
    let result = s.result()?;
    Ok(SimulatedRun {
        window_eval_time: schedule.window_time(&result.timeline),
        result,
        feedback,
    })
}
