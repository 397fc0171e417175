//! Mini-batch SGD training, accuracy evaluation and multi-seed aggregation.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataset::{epoch_batches, eval_set, AugmentConfig, Corpus, DatasetError, FeatureCache, Split};
use crate::features::FeatureMatrix;
use crate::models::{argmax, Model, ModelError, ModelName, ModelSpec};
use crate::nn::{self, NnError};
use crate::rng;
use crate::tensor::Tensor;

/// Samples per gradient partial sum. Partial sums are combined in index
/// order, so results do not depend on the number of worker threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergenceDetected { epoch: u32, loss: f64 },
    #[error("bad training config: {0}")]
    BadConfig(String),
    #[error("nothing to evaluate: {0}")]
    EmptySet(String),
    #[error("seed {seed} failed: {source}")]
    SeedFailed {
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelName,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    /// Published recipe: full model at lr 0.001; compact at 0.01 without
    /// momentum and 0.001 with it. Epoch caps 40 and 70.
    pub fn recipe(model: ModelName, momentum: f32) -> Self {
        let (learning_rate, max_epochs) = match model {
            ModelName::CnnTradPool2 => (0.001, 40),
            ModelName::CnnOneFstride4 if momentum > 0.0 => (0.001, 70),
            ModelName::CnnOneFstride4 => (0.01, 70),
        };
        Self {
            model,
            learning_rate,
            momentum,
            batch_size: 100,
            max_epochs,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::BadConfig(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        self.augment.validate()?;
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::recipe(ModelName::CnnTradPool2, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub best_epoch: u32,
    pub best_validation_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: u32,
    pub history: Vec<EpochRecord>,
}

/// `epoch<TAB>train_loss<TAB>val_accuracy` per line.
pub fn write_history<W: Write>(history: &[EpochRecord], mut w: W) -> io::Result<()> {
    for r in history {
        writeln!(w, "{}\t{:.6}\t{:.6}", r.epoch, r.train_loss, r.val_accuracy)?;
    }
    Ok(())
}

/// Holds a model and its optimizer settings; applies one SGD step per batch.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    learning_rate: f32,
    momentum: f32,
    /// Reported in divergence errors.
    pub epoch: u32,
}

impl Trainer {
    pub fn new(model: Model, learning_rate: f32, momentum: f32) -> Self {
        Self {
            model,
            learning_rate,
            momentum,
            epoch: 0,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Mean loss and mean parameter gradients over `batch`.
    pub fn loss_and_grads(&self, batch: &[(&FeatureMatrix, usize)]) -> Result<(f64, Vec<Tensor>)> {
        let partials = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut loss = 0.0f64;
                let mut acc: Option<Vec<Tensor>> = None;
                for &(features, label) in chunk {
                    let (logits, trace) = self.model.forward_train(features)?;
                    let (l, grad_logits) = nn::softmax_cross_entropy(&logits, label)?;
                    loss += f64::from(l);
                    let grads = self.model.backward(&trace, &grad_logits)?;
                    match acc.as_mut() {
                        None => acc = Some(grads),
                        Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    }
                }
                Ok((loss, acc.expect("chunks are nonempty")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut partials = partials.into_iter();
        let (mut loss, mut grads) = partials
            .next()
            .ok_or_else(|| TrainError::EmptySet("empty batch".into()))?;
        for (l, g) in partials {
            loss += l;
            grads.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b));
        }
        let inv = 1.0 / batch.len() as f32;
        grads.iter_mut().for_each(|g| g.scale(inv));
        Ok((loss / batch.len() as f64, grads))
    }

    /// One SGD step on the batch's mean loss. Returns that loss as it was
    /// before the update.
    pub fn step(&mut self, batch: &[(&FeatureMatrix, usize)]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() {
            return Err(TrainError::DivergenceDetected {
                epoch: self.epoch,
                loss,
            });
        }
        for (p, g) in self.model.parameters_mut().zip(grads) {
            p.grad = g;
        }
        nn::sgd_step(self.model.parameters_mut(), self.learning_rate, self.momentum);
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    /// Mean loss of the very first batch, before any update.
    pub first_batch_loss: f64,
    /// Training accuracy after each epoch.
    pub accuracy: Vec<f64>,
    /// First epoch whose accuracy reached the target.
    pub epochs_to_target: Option<u32>,
}

/// Trains on a fixed in-memory sample set, reshuffled every epoch, until
/// accuracy on that same set reaches `target` or `max_epochs` have run.
pub fn fit_until(
    trainer: &mut Trainer,
    samples: &[(FeatureMatrix, usize)],
    batch_size: usize,
    max_epochs: u32,
    target: f64,
    rng: &mut rng::Rng,
) -> Result<FitReport> {
    if batch_size == 0 {
        return Err(TrainError::BadConfig("batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = FitReport {
        first_batch_loss: f64::NAN,
        accuracy: Vec::new(),
        epochs_to_target: None,
    };
    for epoch in 1..=max_epochs {
        trainer.epoch = epoch;
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&FeatureMatrix, usize)> = chunk.iter().map(|&i| (&samples[i].0, samples[i].1)).collect();
            let loss = trainer.step(&batch)?;
            if report.first_batch_loss.is_nan() {
                report.first_batch_loss = loss;
            }
        }
        let acc = accuracy(trainer.model(), samples)?;
        report.accuracy.push(acc);
        if acc >= target {
            report.epochs_to_target = Some(epoch);
            break;
        }
    }
    Ok(report)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &Model, samples: &[(FeatureMatrix, usize)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptySet("no samples to score".into()));
    }
    let correct = samples
        .par_iter()
        .map(|(features, label)| Ok(usize::from(argmax(model.forward(features)?.data()) == *label)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / samples.len() as f64)
}

/// Accuracy of a checkpoint on an unaugmented split.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus, split: Split) -> Result<f64> {
    accuracy(&checkpoint.model, &eval_set(corpus, split)?)
}

/// Trains one seed, keeping the parameters from the epoch with the best
/// validation accuracy (earliest on ties). `on_epoch` sees each epoch's
/// record as it completes.
pub fn train_with(
    config: &TrainConfig,
    corpus: &Corpus,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, RunResult)> {
    config.validate()?;
    let n_labels = corpus.manifest.n_labels();
    let mut rng = rng::seeded(config.seed);
    let model = Model::build(ModelSpec::for_name(config.model, n_labels), &mut rng)?;
    let mut trainer = Trainer::new(model, config.learning_rate, config.momentum);
    let validation = eval_set(corpus, Split::Validation)?;
    let mut cache = FeatureCache::new();
    let mut history = Vec::new();
    let mut best: Option<(f64, u32, Model)> = None;

    for epoch in 1..=config.max_epochs {
        trainer.epoch = epoch;
        if epoch > 1 {
            cache.evict(config.augment.cache_evict_frac, &mut rng);
        }
        let batches = epoch_batches(
            corpus,
            Split::Train,
            &config.augment,
            &mut cache,
            config.batch_size,
            u64::from(epoch),
            &mut rng,
        )?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in &batches {
            let pairs: Vec<(&FeatureMatrix, usize)> = batch.features.iter().zip(batch.labels.iter().copied()).collect();
            loss_sum += trainer.step(&pairs)? * pairs.len() as f64;
            seen += pairs.len();
        }
        let val_accuracy = accuracy(trainer.model(), &validation)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_accuracy,
        };
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, epoch, trainer.model().clone()));
        }
    }

    let (best_validation_accuracy, best_epoch, model) = best.expect("max_epochs >= 1");
    let test_accuracy = accuracy(&model, &eval_set(corpus, Split::Test)?)?;
    let checkpoint = Checkpoint::new(
        model,
        CheckpointMeta {
            seed: config.seed,
            epoch: best_epoch,
            val_accuracy: Some(best_validation_accuracy),
        },
    );
    let result = RunResult {
        seed: config.seed,
        best_epoch,
        best_validation_accuracy,
        test_accuracy,
        epochs_run: config.max_epochs,
        history,
    };
    Ok((checkpoint, result))
}

pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<(Checkpoint, RunResult)> {
    train_with(config, corpus, |_| {})
}

/// Mean and Student-t 95% half-width, `t(0.975, n-1) * s / sqrt(n)`.
pub fn mean_ci95(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(TrainError::BadConfig(format!(
            "need at least 2 values for a CI, got {n}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mean = sorted.iter().sum::<f64>() / nf;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let t = StudentsT::new(0.0, 1.0, nf - 1.0).expect("dof > 0").inverse_cdf(0.975);
    Ok((mean, t * var.sqrt() / nf.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiSeedResult {
    pub runs: Vec<RunResult>,
    pub mean_test_accuracy: f64,
    pub ci95_half_width: f64,
}

/// Trains and tests once per seed, then aggregates test accuracy.
pub fn multi_seed_run(config: &TrainConfig, corpus: &Corpus, seeds: &[u64]) -> Result<MultiSeedResult> {
    multi_seed_run_with(config, corpus, seeds, |_, _| {})
}

pub fn multi_seed_run_with(
    config: &TrainConfig,
    corpus: &Corpus,
    seeds: &[u64],
    mut on_epoch: impl FnMut(u64, &EpochRecord),
) -> Result<MultiSeedResult> {
    if seeds.len() < 2 {
        return Err(TrainError::BadConfig(format!(
            "multi-seed run needs at least 2 seeds, got {}",
            seeds.len()
        )));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        let (_, run) = train_with(&cfg, corpus, |r| on_epoch(seed, r)).map_err(|e| TrainError::SeedFailed {
            seed,
            source: Box::new(e),
        })?;
        runs.push(run);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean_test_accuracy, ci95_half_width) = mean_ci95(&accs)?;
    Ok(MultiSeedResult {
        runs,
        mean_test_accuracy,
        ci95_half_width,
    })
}
