mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use evoflow::engine::EngineConfig;
use evoflow::experiment::*;
use evoflow::search::{HyperValue, WorkflowSpec, WorkflowStep};
use evoflow::simusers::Profile;

fn tiny_config() -> EngineConfig {
    EngineConfig {
        population_size: 8,
        max_generations: 10,
        ..EngineConfig::default()
    }
}

fn tiny_dataset() -> LoadedDataset {
    let ds = common::load("breastcancer");
    let idx: Vec<usize> = (0..90).collect();
    LoadedDataset {
        name: "bc90".into(),
        train: Arc::new(ds.train.subset(&idx)),
        test: ds.test.clone(),
    }
}

fn fake_opts(out: Option<&Path>, workers: usize) -> RunOptions {
    RunOptions {
        clock: common::key_clock(),
        workers,
        out: out.map(Path::to_path_buf),
        ..RunOptions::default()
    }
}

#[test]
fn one_third_split_matches_published_sizes() {
    let bc = common::load("breastcancer");
    assert_eq!((bc.train.n_rows(), bc.test.n_rows()), (466, 233));
    let glass = common::load("glass");
    assert_eq!((glass.train.n_rows(), glass.test.n_rows()), (142, 72));
    assert_eq!(glass.train.class_names, glass.test.class_names);
    let again = common::load("glass");
    assert_eq!(again.train.labels, glass.train.labels);
    assert_eq!(again.test.features, glass.test.features);
}

#[test]
fn pre_split_files_keep_their_rows() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("toy.csv");
    let test = dir.path().join("toy_test.csv");
    fs::write(&train, "a,b,label\n1,2,x\n3,4,y\n5,6,x\n").unwrap();
    fs::write(&test, "a,b,label\n1,1,z\n2,2,x\n").unwrap();
    let ds = load_dataset(&train, &Split::PreSplit { test: test.clone() }).unwrap();
    assert_eq!((ds.train.n_rows(), ds.test.n_rows()), (3, 2));
    assert_eq!(ds.train.class_names, vec!["x", "y", "z"]);
    assert_eq!(ds.test.labels, vec![2, 0]);
    assert_eq!(ds.name, "toy");
}

#[test]
fn bad_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("m.csv");
    fs::write(&missing, "a,b,label\n1,,x\n3,4,y\n").unwrap();
    assert!(matches!(load_dataset(&missing, &Split::one_third(0)), Err(ExperimentError::BadCell { .. })));
    let text = dir.path().join("t.csv");
    fs::write(&text, "a,label\nfoo,x\n").unwrap();
    assert!(matches!(load_dataset(&text, &Split::one_third(0)), Err(ExperimentError::BadCell { .. })));
    let single = dir.path().join("s.csv");
    fs::write(&single, "a,label\n1,x\n2,x\n3,x\n").unwrap();
    assert!(matches!(load_dataset(&single, &Split::one_third(0)), Err(ExperimentError::SingleClassTrain)));
}

#[test]
fn baseline_is_reproducible_and_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset();
    let a = run_baseline(&ds, &tiny_config(), 3, &fake_opts(Some(dir.path()), 1)).unwrap();
    let b = run_baseline(&ds, &tiny_config(), 3, &fake_opts(None, 1)).unwrap();
    assert_eq!(a.workflow.canonical_key, b.workflow.canonical_key);
    assert!((0.0..=1.0).contains(&a.fitness));
    assert!((0.0..=1.0).contains(&a.test_balanced_accuracy));
    assert_eq!(a.timeline.len(), 11);
    assert_eq!(a.profile, BASELINE);
    assert_eq!(a.window_eval_time, a.timeline[10] - a.timeline[3]);
    let stored = load_results(dir.path()).unwrap();
    assert_eq!(stored, vec![a.clone()]);
    let log = fs::read_to_string(dir.path().join("logs").join(format!("{}.jsonl", a.file_stem()))).unwrap();
    assert_eq!(log.lines().count(), 8 * 11);
}

#[test]
fn sweep_counts_and_is_order_independent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset();
    let glass = common::load("glass");
    let profiles: Vec<Profile> = ["f0.9_t0.5_a12", "t1_a1"].iter().map(|s| s.parse().unwrap()).collect();
    let datasets = vec![ds, glass];
    let seq = run_sweep(&datasets, &profiles, 2, &tiny_config(), 10, &fake_opts(Some(dir.path()), 1)).unwrap();
    assert!(seq.failures.is_empty());
    assert_eq!(seq.results.len(), 2 * 2 * 2 + 2 * 2);
    assert_eq!(seq.results.iter().filter(|r| r.profile == BASELINE).count(), 4);
    assert!(seq.results.iter().all(|r| r.seed == 10 || r.seed == 11));
    let par = run_sweep(&datasets, &profiles, 2, &tiny_config(), 10, &fake_opts(None, 3)).unwrap();
    let strip = |rs: &[ExperimentResult]| -> Vec<(String, String, u64, String, Vec<f64>)> {
        rs.iter()
            .map(|r| (r.dataset.clone(), r.profile.clone(), r.seed, r.workflow.canonical_key.clone(), r.timeline.clone()))
            .collect()
    };
    assert_eq!(strip(&seq.results), strip(&par.results));
    assert_eq!(seq.report.speedups.len(), 4);
    assert!(dir.path().join("speedup.csv").exists());
    let rep = report(dir.path(), &dir.path().join("report")).unwrap();
    assert_eq!(rep, seq.report);
    let runs = fs::read_to_string(dir.path().join("report/runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 13);
}

fn synthetic(dataset: &str, profile: &str, seed: u64, fitness: f64, window: f64) -> ExperimentResult {
    ExperimentResult {
        dataset: dataset.into(),
        profile: profile.into(),
        seed,
        workflow: WorkflowSpec::new(vec![WorkflowStep::new("lda").with("priors", HyperValue::Categorical("uniform".into()))]),
        fitness,
        eval_time: 1.0,
        test_balanced_accuracy: fitness,
        timeline: vec![0.0, 1.0, 1.0 + window],
        window_eval_time: window,
        first_interaction_generation: 1,
        wall_time_seconds: 1.0,
        cache_hits: 0,
        cache_misses: 1,
        interactions: Vec::new(),
    }
}

fn write_all(dir: &Path, rs: &[ExperimentResult]) {
    for r in rs {
        fs::write(dir.join(format!("{}.json", r.file_stem())), serde_json::to_string(r).unwrap()).unwrap();
    }
}

#[test]
fn report_matches_hand_computed_medians() {
    let dir = tempfile::tempdir().unwrap();
    // 5 baselines with window 10; 5 profile runs with windows 10/4/5/8/2.5
    // speedups 1, 2.5, 2, 1.25, 4 -> sorted 1, 1.25, 2, 2.5, 4
    let mut rs = Vec::new();
    for (seed, w) in [10.0, 4.0, 5.0, 8.0, 2.5].into_iter().enumerate() {
        rs.push(synthetic("d", BASELINE, seed as u64, 0.8, 10.0));
        rs.push(synthetic("d", "f0.9_a1", seed as u64, 0.7 + 0.01 * seed as f64, w));
    }
    write_all(dir.path(), &rs);
    let rep = report(dir.path(), &dir.path().join("out")).unwrap();
    let row = rep.speedup("d", "f0.9_a1").unwrap();
    assert_eq!(row.runs, 5);
    assert_eq!((row.speedup.q1, row.speedup.median, row.speedup.q3), (1.25, 2.0, 2.5));
    assert_eq!(row.median_time_ratio, 0.5);
    let fit = rep.fitness.iter().find(|r| r.profile == "f0.9_a1").unwrap();
    assert!((fit.mean_fitness - 0.72).abs() < 1e-12);
    assert!((fit.delta_vs_baseline.unwrap() + 0.08).abs() < 1e-12);
    let csv = fs::read_to_string(dir.path().join("out/speedup.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("d,f0.9_a1,5,1.25,2,2.5,0.5"));
}

#[test]
fn baseline_only_and_unit_speedups() {
    let dir = tempfile::tempdir().unwrap();
    write_all(dir.path(), &[synthetic("d", BASELINE, 0, 0.8, 3.0), synthetic("d", BASELINE, 1, 0.6, 3.0)]);
    let rep = report(dir.path(), &dir.path().join("out")).unwrap();
    assert!(rep.speedups.is_empty());
    assert_eq!(rep.fitness.len(), 1);
    assert!((rep.fitness[0].mean_fitness - 0.7).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let mut rs = Vec::new();
    for seed in 0..3 {
        rs.push(synthetic("d", BASELINE, seed, 0.8, 3.0));
        rs.push(synthetic("d", "t1_a1", seed, 0.8, 3.0));
        rs.push(synthetic("d", "f0.8_a12", seed, 0.8, 3.0));
    }
    write_all(dir.path(), &rs);
    let rep = report(dir.path(), &dir.path().join("out")).unwrap();
    assert_eq!(rep.speedups.len(), 2);
    assert!(rep.speedups.iter().all(|r| r.speedup.median == 1.0));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(report(empty.path(), &empty.path().join("out")), Err(ExperimentError::EmptyResults(_))));
}

#[test]
fn half_window_time_is_speedup_two() {
    let rs = vec![synthetic("d", BASELINE, 0, 0.8, 6.0), synthetic("d", "t0.5_a12", 0, 0.8, 3.0)];
    let rep = SpeedupReport::from_results(&rs);
    assert_eq!(rep.speedup("d", "t0.5_a12").unwrap().speedup.median, 2.0);
}
