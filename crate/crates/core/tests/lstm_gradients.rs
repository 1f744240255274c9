use aqi_core::lstm::{train, HyperParams, SequenceModel};
use common::{as_refs, batch_data, gradient_check};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..3 {
        for (name, rel) in gradient_check(seed, 0.001) {
            assert!(rel < 1e-4, "seed {seed} group {name}: relative error {rel:e}");
        }
    }
}

#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = SequenceModel::init(5, 6, 5);
    let data = batch_data(&mut rng, 8, 4, 5);
    let batch = as_refs(&data);
    let alone: Vec<_> = batch.iter().map(|(w, _)| model.predict_proba(w).unwrap()).collect();
    let (full, _) = model.loss_and_grad(&batch, 0.0, None).unwrap();
    let (half_a, _) = model.loss_and_grad(&batch[..4], 0.0, None).unwrap();
    let (half_b, _) = model.loss_and_grad(&batch[4..], 0.0, None).unwrap();
    assert!((full - (half_a + half_b) / 2.0).abs() < 1e-12);
    for ((w, _), p) in batch.iter().zip(&alone) {
        assert_eq!(model.predict_proba(w).unwrap(), *p);
    }
}

#[test]
fn training_descends_and_is_deterministic() {
    let (instances, labels) = common::toy_instances(50, 4);
    let hp = HyperParams {
        hidden: 8,
        epochs: 10,
        batch_size: 10,
        window: 4,
        learning_rate: 0.005,
        dropout: 0.0,
        patience: None,
        val_fraction: 0.0,
        ..Default::default()
    };
    let (a, log) = train(&instances, &labels, &hp, 7).unwrap();
    assert_eq!(log.train_loss.len(), 10);
    for pair in log.train_loss[1..].windows(2) {
        assert!(pair[1] <= pair[0] + 1e-3, "loss rose: {:?}", log.train_loss);
    }
    assert!(log.train_loss[9] < log.train_loss[0]);
    let (b, _) = train(&instances, &labels, &hp, 7).unwrap();
    assert_eq!(a.params, b.params);
    assert!(train(&[], &[], &hp, 7).is_err());
}

#[test]
fn early_stopping_keeps_best_validation_epoch() {
    let (instances, labels) = common::toy_instances(60, 3);
    let hp = HyperParams {
        hidden: 6,
        epochs: 40,
        batch_size: 16,
        window: 3,
        learning_rate: 0.01,
        patience: Some(3),
        ..Default::default()
    };
    let (_, log) = train(&instances, &labels, &hp, 1).unwrap();
    assert!(log.n_val > 0);
    assert_eq!(log.val_weighted_f1.len(), log.epochs_run);
    let best = log.best_epoch.unwrap();
    assert!(log.epochs_run <= 40);
    if log.epochs_run < 40 {
        assert_eq!(log.epochs_run, best + 1 + 3);
    }
}
