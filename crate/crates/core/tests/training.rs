//! The training loop: learning, validation cadence, early stopping, resume and determinism.

mod common;

use std::fs;
use std::path::Path;

use common::training::{synthetic_sets, train, train_as};
use fer_core::augment::JitterConfig;
use fer_core::train::{
    read_meta, StopReason, TrainConfig, TrainState, BEST_CHECKPOINT, LOSS_TRACE, TRAIN_LOG,
};
use fer_core::Error;

fn quick(validate_every: u64, max_iterations: u64, patience: usize) -> TrainConfig {
    TrainConfig {
        validate_every: Some(validate_every),
        max_iterations,
        patience,
        seed: 5,
        ..TrainConfig::desk()
    }
}

/// Criteria recorded next to every checkpoint, in iteration order.
fn checkpoint_criteria(out: &Path) -> Vec<(u64, f64)> {
    let mut metas: Vec<_> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".safetensors"))
        .map(|p| read_meta(&p).unwrap())
        .map(|m| (m.iteration, m.expression_criterion))
        .collect();
    metas.sort_by_key(|m| m.0);
    metas
}

#[test]
fn memorizes_a_small_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [5, 5, 5, 5, 4, 4, 4], [5, 5, 5, 5, 4, 4, 4], 1);
    let val_is_train = (
        data.0.clone(),
        fer_core::train::ImageSet::new(data.0.manifest().clone(), dir.path(), true).unwrap(),
    );
    let config = TrainConfig {
        class_weights: fer_core::train::ClassWeighting::Uniform,
        ..quick(10, 300, 1_000)
    };
    let out = dir.path().join("run");
    let (outcome, _) = train(
        &out,
        &config,
        &JitterConfig::disabled(),
        &val_is_train,
        false,
    )
    .unwrap();
    assert_eq!(outcome.best.accuracy, 1.0, "{:?}", outcome.validations);
    assert!(outcome.best.iteration <= 300);
}

#[test]
fn validates_on_the_cadence_and_at_the_last_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [4; 7], [2; 7], 2);
    for (max, expected) in [(20, vec![5, 10, 15, 20]), (12, vec![5, 10, 12])] {
        let out = dir.path().join(format!("run{max}"));
        let (outcome, _) = train(
            &out,
            &quick(5, max, 100),
            &JitterConfig::default(),
            &data,
            false,
        )
        .unwrap();
        let at: Vec<u64> = outcome.validations.iter().map(|v| v.iteration).collect();
        assert_eq!(at, expected);
        assert_eq!(outcome.stop, StopReason::MaxIterations);
        assert_eq!(outcome.loss_trace.len() as u64, max);
        let log = fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), expected.len());
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in [
                "iteration",
                "loss",
                "macro_f1",
                "accuracy",
                "criterion",
                "is_best",
            ] {
                assert!(v.get(key).is_some(), "{key} missing from {line}");
            }
        }
    }
}

#[test]
fn stops_two_validations_after_a_stalled_best() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [4; 7], [2; 7], 3);
    let stalled = TrainConfig {
        lr_head: 1e-12,
        lr_backbone: 1e-12,
        ..quick(5, 500, 2)
    };
    let out = dir.path().join("run");
    let (outcome, _) = train(&out, &stalled, &JitterConfig::default(), &data, false).unwrap();
    // Running statistics still drift at a vanishing learning rate, so the best may come late.
    assert_eq!(outcome.stop, StopReason::Patience);
    assert_eq!(outcome.final_iteration, outcome.best.iteration + 10);
    let improvements = outcome.validations.iter().filter(|v| v.is_best).count();
    assert_eq!(checkpoint_criteria(&out).len(), improvements);
    assert!(outcome.validations.iter().rev().take(2).all(|v| !v.is_best));
}

#[test]
fn checkpointed_criteria_never_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [12; 7], [4; 7], 4);
    let out = dir.path().join("run");
    let (outcome, _) = train(
        &out,
        &quick(5, 500, 2),
        &JitterConfig::default(),
        &data,
        false,
    )
    .unwrap();
    let criteria = checkpoint_criteria(&out);
    assert!(criteria.windows(2).all(|w| w[1].1 > w[0].1), "{criteria:?}");
    assert_eq!(criteria.last().unwrap().0, outcome.best.iteration);
    let best = read_meta(&out.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.expression_criterion, criteria.last().unwrap().1);
    if outcome.stop == StopReason::Patience {
        assert_eq!(outcome.final_iteration, outcome.best.iteration + 10);
    }
}

#[test]
fn reruns_reproduce_the_loss_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [4; 7], [2; 7], 5);
    let config = quick(5, 15, 100);
    let run = |name: &str| {
        let out = dir.path().join(name);
        train(&out, &config, &JitterConfig::default(), &data, false).unwrap();
        fs::read(out.join(LOSS_TRACE)).unwrap()
    };
    let first = run("a");
    assert_eq!(first, run("b"));
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    assert_eq!(first, single.install(|| run("c")));
}

#[test]
fn resume_continues_where_the_run_left_off() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [4; 7], [2; 7], 6);
    let jitter = JitterConfig::default();
    let full_out = dir.path().join("full");
    let (full, _) = train(&full_out, &quick(5, 20, 100), &jitter, &data, false).unwrap();

    // The first leg stands in for the 20-iteration run interrupted after iteration 10.
    let hash = TrainState::<f32>::load(&full_out).unwrap().config_hash;
    let out = dir.path().join("split");
    train_as(&out, &quick(5, 10, 100), &jitter, &data, false, hash).unwrap();
    let state = TrainState::<f32>::load(&out).unwrap();
    assert_eq!((state.iteration, state.rng_state.draws), (10, 160));
    let (resumed, _) = train(&out, &quick(5, 20, 100), &jitter, &data, true).unwrap();
    assert_eq!(resumed.final_iteration, 20);
    assert_eq!(resumed.loss_trace, full.loss_trace);
    assert_eq!(
        fs::read(out.join(LOSS_TRACE)).unwrap(),
        fs::read(full_out.join(LOSS_TRACE)).unwrap()
    );
    assert_eq!(
        resumed.best.expression_criterion,
        full.best.expression_criterion
    );
}

#[test]
fn resume_refuses_a_different_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [4; 7], [2; 7], 7);
    let out = dir.path().join("run");
    train(
        &out,
        &quick(5, 5, 100),
        &JitterConfig::default(),
        &data,
        false,
    )
    .unwrap();
    let err = train(
        &out,
        &quick(5, 10, 100),
        &JitterConfig::default(),
        &data,
        true,
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Config(_)) && err.to_string().contains("cannot resume"),
        "{err}"
    );
}

#[test]
fn empty_splits_and_bad_settings_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [1; 7], [1; 7], 8);
    let out = dir.path().join("run");
    let bad = TrainConfig {
        batch_size: 15,
        ..quick(5, 5, 1)
    };
    assert!(matches!(
        train(&out, &bad, &JitterConfig::default(), &data, false),
        Err(Error::Config(_))
    ));
    assert!(!out.exists());
    let empty = fer_core::dataset::DatasetManifest::empty(fer_core::dataset::Split::Val);
    let no_val = (
        data.0.clone(),
        fer_core::train::ImageSet::new(empty, dir.path(), true).unwrap(),
    );
    assert!(matches!(
        train(
            &out,
            &quick(5, 5, 1),
            &JitterConfig::default(),
            &no_val,
            false
        ),
        Err(Error::Config(_))
    ));
}

#[test]
fn a_missing_class_cannot_be_weighted() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_sets(dir.path(), [2, 2, 2, 0, 2, 2, 2], [1; 7], 9);
    let err = train(
        &dir.path().join("run"),
        &quick(5, 5, 1),
        &JitterConfig::default(),
        &data,
        false,
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Domain(_)) && err.to_string().contains("Fear"),
        "{err}"
    );
}
