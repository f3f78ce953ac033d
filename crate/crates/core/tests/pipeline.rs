mod common;

use cil_core::harness::config::{BudgetTarget, DatasetSource, ExperimentConfig, SyntheticSpec};
use cil_core::harness::data::{synth_dataset, write_cild, write_csv};
use cil_core::harness::prng::shuffle_class_order;
use cil_core::harness::run_experiment;
use cil_core::learners::{DataHandle, Method};
use cil_core::netblocks::BackboneSpec;
use cil_core::Error;

#[test]
fn golden_class_order() {
    assert_eq!(shuffle_class_order(10, 1993), GOLDEN_1993);
}

/// Pinned once from this crate's SplitMix64 Fisher–Yates shuffle.
const GOLDEN_1993: [usize; 10] = [7, 5, 4, 3, 8, 0, 1, 9, 2, 6];

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..20 {
        let err = common::gradient_relative_error(seed, 1e-6);
        assert!(err < 1e-6, "graph {seed}: relative error {err:e}");
    }
}

#[test]
fn expansion_invariants_hold() {
    assert_eq!(common::expansion_invariant_failures(), Vec::<String>::new());
}

#[test]
fn learners_only_touch_the_current_task() {
    let stream = common::small_stream(6, 2, 4, 9);
    let spec = BackboneSpec::new(4, 6, 2).unwrap();
    for method in Method::ALL {
        let mut learner = common::small_learner(method, &spec, 12);
        for b in 0..stream.stage_train.len() {
            let handle = common::train_stage(&mut learner, &stream, b);
            assert_eq!(&handle.accessed(), handle.allowed(), "{} stage {b}", method.name());
        }
        assert!(learner.exemplars().len() <= 12);
    }
}

#[test]
fn out_of_protocol_access_is_rejected() {
    let stream = common::small_stream(6, 2, 4, 9);
    let spec = BackboneSpec::new(4, 6, 2).unwrap();
    let mut learner = common::small_learner(Method::Replay, &spec, 12);

    let handle = DataHandle::new(&stream.train, stream.stage_train[0].iter().copied());
    assert!(matches!(handle.fetch(&stream.stage_train[1]), Err(Error::Protocol(_))));

    // Evaluating on a class that has not been taught yet.
    let unseen = stream.test.subset(&stream.stage_test[1]).unwrap();
    let ids = &stream.stage_train[0];
    let err = learner.train_stage(&handle, ids, &unseen).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");

    // Teaching a class twice.
    let seen = stream.test.subset(&stream.stage_test[0]).unwrap();
    learner.train_stage(&handle, ids, &seen).unwrap();
    let err = learner.train_stage(&handle, ids, &seen).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

fn small_config(method: Method, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(method, seed);
    c.dataset = DatasetSource::Synthetic(SyntheticSpec {
        classes: 6,
        train_per_class: 20,
        test_per_class: 5,
        dim: 5,
        spread: 0.3,
    });
    c.backbone.hidden_dim = 6;
    c.learner.epochs = 3;
    c.budget.target = BudgetTarget::AlignTo {
        method: Method::Der,
        exemplars: 12,
    };
    c
}

#[test]
fn runs_repeat_exactly_and_seeds_matter() {
    for method in Method::ALL {
        let a = run_experiment(&small_config(method, 4)).unwrap();
        let b = run_experiment(&small_config(method, 4)).unwrap();
        assert_eq!(
            a.without_timing().to_json().unwrap(),
            b.without_timing().to_json().unwrap()
        );
        let c = run_experiment(&small_config(method, 5)).unwrap();
        assert_ne!(a.class_order, c.class_order);
        assert!(a.ledgers.iter().all(|l| l.total_bytes() <= a.target_bytes));
    }
}

fn file_config(train: &str, test: &str) -> String {
    format!(
        r#"{{"method": "memo", "seed": 3,
            "dataset": {{"files": {{"train": "{train}", "test": "{test}"}}}},
            "split": {{"base": 2, "increment": 2}},
            "backbone": {{"hidden_dim": 6, "num_blocks": 3}},
            "budget": {{"align_to": {{"method": "der", "exemplars": 10}}}},
            "learner": {{"epochs": 3}}}}"#
    )
}

#[test]
fn cild_and_csv_files_give_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(6, 15, 5, 4, 0.3, 21).unwrap();
    write_cild(&dir.path().join("train.cild"), &ds.train).unwrap();
    write_cild(&dir.path().join("test.cild"), &ds.test).unwrap();
    write_csv(&dir.path().join("train.csv"), &ds.train).unwrap();
    write_csv(&dir.path().join("test.csv"), &ds.test).unwrap();

    let mut records = Vec::new();
    for (train, test, name) in [
        ("train.cild", "test.cild", "cild.json"),
        ("train.csv", "test.csv", "csv.json"),
    ] {
        let path = dir.path().join(name);
        std::fs::write(&path, file_config(train, test)).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        records.push(run_experiment(&cfg).unwrap());
    }
    let (a, b) = (&records[0], &records[1]);
    assert_eq!(a.stages.len(), 3);
    assert_eq!(a.class_order, b.class_order);
    assert_eq!(a.target_bytes, b.target_bytes);
    let strip = |r: &cil_core::harness::RunRecord| {
        r.without_timing()
            .stages
            .iter()
            .map(|s| (s.accuracy.to_bits(), s.final_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(a), strip(b));
}

#[test]
fn missing_dataset_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, file_config("nope.cild", "nope.cild")).unwrap();
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert!(matches!(run_experiment(&cfg), Err(Error::Io(_))));
}
