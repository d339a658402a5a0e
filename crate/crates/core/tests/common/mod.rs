#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use evoflow::evaluation::FakeClock;
use evoflow::experiment::{load_dataset, LoadedDataset, Split};
use evoflow::mlcatalog::Dataset;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../datasets")
}

pub fn load(name: &str) -> LoadedDataset {
    load_dataset(&data_dir().join(format!("{name}.csv")), &Split::one_third(0)).unwrap()
}

/// First `n` training rows of breastcancer; enough for quick engine runs.
pub fn small_train(n: usize) -> Arc<Dataset> {
    let ds = load("breastcancer");
    let idx: Vec<usize> = (0..n.min(ds.train.n_rows())).collect();
    Arc::new(ds.train.subset(&idx))
}

/// Deterministic evaluation times derived from the key.
pub fn key_clock() -> Arc<FakeClock> {
    Arc::new(FakeClock::per_key(|k| 0.01 + (k.len() % 17) as f64 * 0.01))
}

use evoflow::evaluation::EvaluationRecord;
use evoflow::grammar::Grammar;
use evoflow::interaction::SnapshotIndividual;
use evoflow::search::SearchSpace;
use rand::Rng;

/// Random decoded workflows with random fitness and time.
pub fn random_individuals<R: Rng>(grammar: &Grammar, n: usize, rng: &mut R) -> Vec<SnapshotIndividual> {
    let space = SearchSpace::new(Arc::new(grammar.clone()), 13).unwrap();
    (0..n)
        .map(|_| {
            let workflow = space.random_individual(rng).workflow;
            SnapshotIndividual {
                record: EvaluationRecord {
                    fitness: rng.gen_range(0.0..1.0),
                    eval_time: rng.gen_range(0.0..5.0),
                    failed: false,
                    classifier: workflow.classifier().to_string(),
                    failure: None,
                },
                workflow,
                generation: 0,
            }
        })
        .collect()
}
