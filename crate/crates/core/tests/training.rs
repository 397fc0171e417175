mod support;

use kwsforge::checkpoint::Checkpoint;
use kwsforge::dataset::{eval_set, Split};
use kwsforge::features::FeatureMatrix;
use kwsforge::models::{Model, ModelName, ModelSpec};
use kwsforge::nn::{softmax_cross_entropy, truncated_normal_init};
use kwsforge::rng::seeded;
use kwsforge::synth::toy_samples;
use kwsforge::training::{accuracy, evaluate, multi_seed_run, train, write_history, TrainConfig, TrainError, Trainer};

#[test]
fn truncated_normal_statistics() {
    let t = truncated_normal_init(&[1_000_000], 0.0, 0.01, &mut seeded(11));
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    // Normal truncated at two sigma keeps std * sqrt(1 - 2*2*phi(2)/(2*Phi(2)-1)).
    let phi2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = 0.954_499_736_103_642;
    let expected_std = 0.01 * (1.0 - 4.0 * phi2 / mass).sqrt();
    assert!(mean.abs() < 5e-5, "mean {mean}");
    assert!(
        (var.sqrt() / expected_std - 1.0).abs() < 0.005,
        "std {} vs {expected_std}",
        var.sqrt()
    );
    assert!(t.data().iter().all(|v| v.abs() <= 0.02));
}

#[test]
fn fresh_model_loss_is_near_uniform() {
    let samples = toy_samples(12, &mut seeded(5)).unwrap();
    let model = Model::build(ModelSpec::cnn_trad_pool2(12), &mut seeded(6)).unwrap();
    let mean = samples
        .iter()
        .map(|(f, label)| f64::from(softmax_cross_entropy(&model.forward(f).unwrap(), *label).unwrap().0))
        .sum::<f64>()
        / samples.len() as f64;
    assert!((mean - 12f64.ln()).abs() < 0.1, "mean loss {mean}");
}

#[test]
fn one_small_step_lowers_each_sample_loss() {
    let samples = toy_samples(10, &mut seeded(21)).unwrap();
    let base = Model::build(ModelSpec::cnn_trad_pool2(12), &mut seeded(22)).unwrap();
    for (f, label) in &samples {
        let mut trainer = Trainer::new(base.clone(), 1e-5, 0.0);
        let before = trainer.step(&[(f, *label)]).unwrap();
        let (after, _) = trainer.loss_and_grads(&[(f, *label)]).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }
}

#[test]
fn non_finite_loss_is_divergence() {
    let model = Model::build(ModelSpec::cnn_one_fstride4(12), &mut seeded(1)).unwrap();
    let mut trainer = Trainer::new(model, 0.01, 0.0);
    trainer.epoch = 4;
    let bad = FeatureMatrix::new(101, 40, vec![f32::NAN; 101 * 40]);
    match trainer.step(&[(&bad, 0)]) {
        Err(TrainError::DivergenceDetected { epoch, loss }) => {
            assert_eq!(epoch, 4);
            assert!(!loss.is_finite());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn constant_prediction_scores_class_share() {
    // All-zero logits tie everywhere; argmax picks class 0 (silence).
    let model = Model::zeroed(ModelSpec::cnn_one_fstride4(12)).unwrap();
    let samples: Vec<_> = toy_samples(10, &mut seeded(2))
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, (f, _))| (f, if i == 0 { 0 } else { 2 + i % 10 }))
        .collect();
    assert_eq!(accuracy(&model, &samples).unwrap(), 0.10);
    let mut reversed = samples.clone();
    reversed.reverse();
    assert_eq!(accuracy(&model, &reversed).unwrap(), 0.10);
    assert!(accuracy(&model, &[]).is_err());
}

#[test]
fn toy_corpus_training_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::toy_corpus(dir.path());
    let config = TrainConfig {
        max_epochs: 3,
        ..support::toy_train_config(7)
    };

    let mut seen = Vec::new();
    let (ckpt, run) = kwsforge::training::train_with(&config, &corpus, |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(run.history.len(), 3);
    assert_eq!(run.epochs_run, 3);
    let best = run.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(run.best_validation_accuracy, best);
    assert_eq!(ckpt.meta.epoch, run.best_epoch);
    assert_eq!(run.history[run.best_epoch as usize - 1].val_accuracy, best);
    for r in &run.history {
        assert!((0.0..=1.0).contains(&r.val_accuracy) && r.train_loss.is_finite());
    }

    let test = evaluate(&ckpt, &corpus, Split::Test).unwrap();
    assert_eq!(test, run.test_accuracy);
    assert_eq!(test, evaluate(&ckpt, &corpus, Split::Test).unwrap());

    let untrained = Model::build(ModelSpec::cnn_trad_pool2(12), &mut seeded(7)).unwrap();
    let train_items = eval_set(&corpus, Split::Train).unwrap();
    let before = accuracy(&untrained, &train_items).unwrap();
    let after = accuracy(&ckpt.model, &train_items).unwrap();
    assert!(after >= before, "trained {after} < untrained {before}");

    let restored = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(restored.to_bytes(), ckpt.to_bytes());

    let mut tsv = Vec::new();
    write_history(&run.history, &mut tsv).unwrap();
    let text = String::from_utf8(tsv).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().next().unwrap().split('\t').count(), 3);
    assert!(text.starts_with("1\t"));
}

#[test]
fn seeded_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::toy_corpus(dir.path());
    let config = TrainConfig {
        model: ModelName::CnnOneFstride4,
        max_epochs: 2,
        ..support::toy_train_config(7)
    };
    let a = train(&config, &corpus).unwrap();
    let b = train(&config, &corpus).unwrap();
    assert_eq!(a.0.to_bytes(), b.0.to_bytes());
    assert_eq!(a.1, b.1);
    let c = train(&TrainConfig { seed: 8, ..config }, &corpus).unwrap();
    assert_ne!(a.0.to_bytes(), c.0.to_bytes());
}

#[test]
fn multi_seed_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = support::toy_corpus(dir.path());
    let config = TrainConfig {
        model: ModelName::CnnOneFstride4,
        max_epochs: 1,
        ..support::toy_train_config(0)
    };
    let ab = multi_seed_run(&config, &corpus, &[1, 2]).unwrap();
    let ba = multi_seed_run(&config, &corpus, &[2, 1]).unwrap();
    assert_eq!(ab.mean_test_accuracy, ba.mean_test_accuracy);
    assert_eq!(ab.ci95_half_width, ba.ci95_half_width);
    assert_eq!(ab.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![1, 2]);
    let accs: Vec<f64> = ab.runs.iter().map(|r| r.test_accuracy).collect();
    assert!((ab.mean_test_accuracy - (accs[0] + accs[1]) / 2.0).abs() < 1e-12);
    assert!(matches!(
        multi_seed_run(&config, &corpus, &[1]),
        Err(TrainError::BadConfig(_))
    ));

    let bad = TrainConfig {
        learning_rate: -1.0,
        ..config
    };
    assert!(matches!(
        multi_seed_run(&bad, &corpus, &[1, 2]),
        Err(TrainError::SeedFailed { seed: 1, .. })
    ));
}
