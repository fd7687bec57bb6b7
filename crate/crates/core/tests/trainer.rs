mod common;

use cavg::checkpoint::Checkpoint;
use cavg::config::TrainConfig;
use cavg::data::{split_dataset, Dataset, GenParams, SplitFractions};
use cavg::encoders::RuleClassifier;
use cavg::error::Error;
use cavg::eval::evaluate;
use cavg::trainer::{batch_gradients, make_targets, train, LogRecord, TrainLog};
use common::small_config;

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: small_config(),
        epochs,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn dataset(n: usize) -> Dataset {
    let mut ds = Dataset::synthetic(4, n, &GenParams::default()).unwrap();
    split_dataset(&mut ds, SplitFractions::new(0.6, 0.2, 0.2).unwrap(), 1).unwrap();
    ds
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let ds = dataset(20);
    let cfg = config(0);
    let out = train(&cfg, &ds, &RuleClassifier, None).unwrap();
    let init = cavg::Model::new(cfg.model.clone(), out.final_model.vocab.clone(), cfg.seed).unwrap();
    assert_eq!(out.best.params, init.params);
    assert_eq!(out.final_model.params, init.params);
    assert!(out.log.losses().is_empty());
    assert!(matches!(out.log.records.last(), Some(LogRecord::End { steps: 0, .. })));
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let ds = dataset(24);
    let cfg = config(2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let a = train(&cfg, &ds, &RuleClassifier, Some(&path)).unwrap();
    let b = train(&cfg, &ds, &RuleClassifier, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    let from_file = TrainLog::from_jsonl(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(from_file, a.log);
    assert_eq!(a.log.epochs().len(), 2);
    let c = train(&TrainConfig { seed: 4, ..cfg }, &ds, &RuleClassifier, None).unwrap();
    assert_ne!(c.log.losses(), a.log.losses());
}

#[test]
fn small_step_decreases_batch_loss() {
    let ds = dataset(8);
    let cfg = config(1);
    let model = cavg::Model::new(cfg.model.clone(), cavg::encoders::Vocabulary::builtin(), 1).unwrap();
    let data: Vec<_> = ds
        .samples
        .iter()
        .map(|s| (model.prepare(s, &RuleClassifier).unwrap(), make_targets(&s.scene).unwrap()))
        .collect();
    let batch: Vec<_> = data.iter().collect();
    let (before, grads) = batch_gradients(&model, &batch, 1e-7).unwrap();
    let mut stepped = model.clone();
    for (id, g) in stepped.params.ids().collect::<Vec<_>>().into_iter().zip(&grads) {
        if stepped.params.is_frozen(id) {
            continue;
        }
        let p = stepped.params.get_mut(id);
        for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= 1e-5 * d;
        }
    }
    let (after, _) = batch_gradients(&stepped, &batch, 1e-7).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn non_finite_values_abort_with_scene_ids() {
    let mut ds = dataset(10);
    for s in &mut ds.samples {
        s.split = None;
    }
    let victim = ds.samples[2].scene.id.clone();
    for r in &mut ds.samples[2].scene.regions {
        r.features.iter_mut().for_each(|x| *x = 1e300);
    }
    let cfg = TrainConfig { batch_size: 10, ..config(1) };
    match train(&cfg, &ds, &RuleClassifier, None) {
        Err(Error::Numeric(m)) => assert!(m.contains(&victim), "{m}"),
        other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_reload_reproduces_the_report() {
    let ds = dataset(20);
    let out = train(&config(1), &ds, &RuleClassifier, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.best.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.digest(), out.best.digest());
    let samples: Vec<_> = ds.samples.iter().collect();
    let a = evaluate(&out.best.to_model().unwrap(), &samples, None, &RuleClassifier, &out.best.digest()).unwrap();
    let b = evaluate(&loaded.to_model().unwrap(), &samples, None, &RuleClassifier, &loaded.digest()).unwrap();
    assert_eq!(a.canonical_json(), b.canonical_json());
}

#[test]
fn fraction_selects_a_prefix_subset() {
    let ds = dataset(40);
    let full = train(&config(0), &ds, &RuleClassifier, None).unwrap();
    let half = train(&TrainConfig { fraction: 0.5, ..config(0) }, &ds, &RuleClassifier, None).unwrap();
    assert_eq!(full.train_ids.len(), 24);
    assert_eq!(half.train_ids.len(), 12);
    assert_eq!(&full.train_ids[..12], &half.train_ids[..]);
    assert!(train(&TrainConfig { fraction: 0.0, ..config(0) }, &ds, &RuleClassifier, None).is_err());
}
