mod common;

use std::collections::BTreeSet;

use evoflow::engine::{EngineConfig, StartOptions};
use evoflow::grammar::Grammar;
use evoflow::simusers::{run_simulated, AlgorithmStrategy, Profile, Schedule};

fn config(seed: u64) -> EngineConfig {
    EngineConfig {
        population_size: 12,
        seed,
        ..EngineConfig::default()
    }
}

#[test]
fn suite_runs_share_the_pre_interaction_prefix() {
    let train = common::small_train(100);
    let schedule = Schedule::scaled(10);
    assert_eq!((schedule.first, schedule.gap), (3, 3));
    let mut prefixes = BTreeSet::new();
    let mut ids = BTreeSet::new();
    for p in Profile::suite() {
        let run = run_simulated(&p, &config(4), Grammar::default_grammar(), train.clone(), schedule, StartOptions::with_clock(common::key_clock()), None).unwrap();
        ids.insert(p.id());
        // replacements evaluated at a pause carry its generation number, so
        // compare the log strictly before it plus the timeline up to it
        let prefix: Vec<String> = run
            .result
            .eval_log
            .iter()
            .filter(|e| e.generation < schedule.first)
            .map(|e| e.individual.workflow.canonical_key.clone())
            .collect();
        prefixes.insert((prefix, format!("{:?}", &run.result.timeline[..=schedule.first])));
        assert_eq!(run.result.timeline.len(), 11);
        assert_eq!(run.feedback.len(), 2);
        let quota = p.strategy().quota(20);
        assert!(run.feedback.iter().all(|f| f.remove_algorithms.len() <= quota));
        assert_eq!(run.window_eval_time, run.result.timeline[10] - run.result.timeline[3]);
    }
    assert_eq!(ids.len(), 16);
    assert_eq!(prefixes.len(), 1);
}

#[test]
fn third_strategy_never_exceeds_seven_removals() {
    let train = common::small_train(100);
    let p = Profile::new(0.9, 0.5, AlgorithmStrategy::UpToOneThird).unwrap();
    for seed in 0..3 {
        let run = run_simulated(&p, &config(seed), Grammar::default_grammar(), train.clone(), Schedule::scaled(10), StartOptions::with_clock(common::key_clock()), None).unwrap();
        for f in &run.feedback {
            assert!(f.remove_algorithms.len() <= 7);
            assert!(f.thresholds_used.t_acc.is_some() && f.thresholds_used.t_time.is_some());
        }
    }
}

#[test]
fn decisions_are_deterministic() {
    let train = common::small_train(100);
    let p: Profile = "f0.8_t1_a12".parse().unwrap();
    let a = run_simulated(&p, &config(2), Grammar::default_grammar(), train.clone(), Schedule::scaled(10), StartOptions::with_clock(common::key_clock()), None).unwrap();
    let b = run_simulated(&p, &config(2), Grammar::default_grammar(), train, Schedule::scaled(10), StartOptions::with_clock(common::key_clock()), None).unwrap();
    assert_eq!(a.feedback, b.feedback);
    assert_eq!(a.result.archive.workflow, b.result.archive.workflow);
}
