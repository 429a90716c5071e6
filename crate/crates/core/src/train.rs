//! Mini-batch SGD training, evaluation and k-fold cross-validation.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape};
use crate::checkpoint::Classifier;
use crate::config::Config;
use crate::data::{preprocess, Dataset, SplitPlan};
use crate::error::{Error, Result};
use crate::head::one_hot;
use crate::metrics::{argmax, compute_metrics, MetricsReport};
use crate::model::Model;
use crate::nn::Parameters;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Independent random streams derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_AUGMENT: u64 = 3;
const STREAM_DROPOUT: u64 = 4;

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Fraction of samples whose train-mode prediction was correct.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub history: Vec<EpochRecord>,
}

pub fn history_json(history: &[EpochRecord]) -> String {
    serde_json::to_string_pretty(history).expect("history serializes")
}

/// Trains a fresh model on `indices` of `ds`.
pub fn train(config: &Config, ds: &Dataset, indices: &[usize]) -> Result<TrainOutcome> {
    config.validate()?;
    if indices.is_empty() {
        return Err(Error::arg("no training samples"));
    }
    let t = &config.train;
    let root = Rng::new(t.seed);
    let model = Model::<f32>::new(config.model.clone(), ds.num_classes(), &mut root.fork(STREAM_INIT))?;
    let mut classifier = Classifier {
        config: config.clone(),
        classes: ds.classes.clone(),
        means: ds.channel_means(indices),
        model,
    };
    let (mut shuffle, mut aug, mut drop) = (
        root.fork(STREAM_SHUFFLE),
        root.fork(STREAM_AUGMENT),
        root.fork(STREAM_DROPOUT),
    );
    let pre = classifier.preprocessor();
    let mut order = indices.to_vec();
    let mut history = Vec::with_capacity(t.epochs);
    for epoch in 1..=t.epochs {
        let lr = t.lr_at(epoch);
        shuffle.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, batch) in order.chunks(t.batch).enumerate() {
            let inputs = batch
                .iter()
                .map(|&i| preprocess(&ds.images[i], &pre, Mode::Train, &mut aug))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| ds.samples[i].label).collect();
            let model = &mut classifier.model;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let out = model.forward_batch(&mut tape, &vars, &inputs.iter().collect::<Vec<_>>(), Mode::Train, &mut drop)?;
            let target = one_hot::<f32>(&labels, model.classes())?;
            let loss = tape.cross_entropy(out.probs, &target)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: b,
                    message: format!("loss is {value}"),
                });
            }
            let probs = tape.value(out.probs);
            let n = model.classes();
            for (row, &l) in probs.data().chunks(n).zip(&labels) {
                let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                correct += usize::from(argmax(&row) == l);
            }
            loss_sum += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.apply_sgd(&vars.all, &grads, lr as f32)?;
            if let Some(stats) = &out.batch_stats {
                model.head.update_running_stats(stats);
            }
            debug!("epoch {epoch} batch {b}: loss {value:.5}");
        }
        let rec = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / order.len() as f64,
            train_accuracy: correct as f64 / order.len() as f64,
        };
        info!(
            "epoch {epoch}/{}: lr {lr:.2e} loss {:.4} train acc {:.3}",
            t.epochs, rec.loss, rec.train_accuracy
        );
        history.push(rec);
    }
    Ok(TrainOutcome { classifier, history })
}

/// Eval-mode predictions over a subset.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub probabilities: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn evaluate(c: &Classifier, ds: &Dataset, indices: &[usize]) -> Result<Evaluation> {
    if c.classes != ds.classes {
        return Err(Error::ClassMismatch {
            checkpoint: c.classes.clone(),
            dataset: ds.classes.clone(),
        });
    }
    if indices.is_empty() {
        return Err(Error::arg("nothing to evaluate"));
    }
    let mut probabilities = Vec::with_capacity(indices.len());
    for &i in indices {
        let x = c.prepare(&ds.images[i])?;
        probabilities.extend(c.model.predict(&[&x])?);
    }
    let predictions: Vec<usize> = probabilities.iter().map(|r| argmax(r)).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| ds.samples[i].label).collect();
    let report = compute_metrics(&predictions, &labels, ds.num_classes())?.with_top_k(
        &probabilities,
        &labels,
        &[1, 3],
    )?;
    Ok(Evaluation {
        report,
        probabilities,
        predictions,
        labels,
    })
}

/// Headline numbers for one table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub top3: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Summary {
    pub fn of(r: &MetricsReport) -> Self {
        Self {
            accuracy: r.accuracy,
            top3: r.top_k.get("3").copied(),
            precision: r.macro_avg.precision,
            recall: r.macro_avg.recall,
            f1: r.macro_avg.f1,
        }
    }

    fn mean(rows: &[Summary]) -> Self {
        let n = rows.len() as f64;
        let avg = |f: fn(&Summary) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            accuracy: avg(|s| s.accuracy),
            top3: rows
                .iter()
                .map(|s| s.top3)
                .sum::<Option<f64>>()
                .map(|v| v / n),
            precision: avg(|s| s.precision),
            recall: avg(|s| s.recall),
            f1: avg(|s| s.f1),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub validation: Summary,
    pub test: Option<Summary>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    pub avg: FoldAverage,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldAverage {
    pub validation: Summary,
    pub test: Option<Summary>,
}

/// Trains one model per fold of `plan`, validating on the held-out fold
/// and testing on `plan.test`. `on_fold` sees every trained fold.
pub fn cross_validate(
    config: &Config,
    ds: &Dataset,
    plan: &SplitPlan,
    mut on_fold: impl FnMut(usize, &TrainOutcome) -> Result<()>,
) -> Result<CrossValidation> {
    if plan.folds.is_empty() {
        return Err(Error::arg("split plan has no folds"));
    }
    let mut folds = Vec::with_capacity(plan.folds.len());
    for k in 0..plan.folds.len() {
        let (tr, val) = plan.fold(k)?;
        info!("fold {}/{}: {} train, {} validation", k + 1, plan.folds.len(), tr.len(), val.len());
        let outcome = train(config, ds, &tr)?;
        on_fold(k, &outcome)?;
        let validation = Summary::of(&evaluate(&outcome.classifier, ds, &val)?.report);
        let test = if plan.test.is_empty() {
            None
        } else {
            Some(Summary::of(&evaluate(&outcome.classifier, ds, &plan.test)?.report))
        };
        folds.push(FoldResult {
            fold: k + 1,
            train_size: tr.len(),
            val_size: val.len(),
            validation,
            test,
        });
    }
    let vals: Vec<Summary> = folds.iter().map(|f| f.validation.clone()).collect();
    let tests: Option<Vec<Summary>> = folds.iter().map(|f| f.test.clone()).collect();
    Ok(CrossValidation {
        avg: FoldAverage {
            validation: Summary::mean(&vals),
            test: tests.map(|t| Summary::mean(&t)),
        },
        folds,
    })
}

/// Copies of every trainable tensor, for before/after comparisons.
pub fn snapshot(model: &Model<f32>) -> Vec<Tensor<f32>> {
    model.tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::config::{AugmentConfig, ModelConfig};
    use crate::data::synthetic::blob_dataset;
    use crate::data::{kfold_split, split_train_test};

    fn tiny_config(epochs: usize) -> Config {
        let mut c = Config::default();
        c.model = ModelConfig {
            input_size: 16,
            backbone: BackboneConfig {
                widths: vec![4, 8],
                kernel: 3,
                pool: 2,
                channels: 8,
            },
            ..ModelConfig::default()
        };
        c.train.resize_size = 18;
        c.train.epochs = epochs;
        c.train.batch = 4;
        c
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let ds = blob_dataset(2, 4, 18, 1).unwrap();
        let mut cfg = tiny_config(3);
        cfg.train.lr = 0.0;
        let all: Vec<usize> = (0..ds.len()).collect();
        let out = train(&cfg, &ds, &all).unwrap();
        let fresh = Model::<f32>::new(cfg.model.clone(), 2, &mut Rng::new(cfg.train.seed).fork(STREAM_INIT)).unwrap();
        let (a, b) = (snapshot(&out.classifier.model), snapshot(&fresh));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn schedule_and_determinism() {
        let ds = blob_dataset(2, 3, 18, 2).unwrap();
        let mut cfg = tiny_config(4);
        cfg.train.lr_decay_epoch = 2;
        let all: Vec<usize> = (0..ds.len()).collect();
        let a = train(&cfg, &ds, &all).unwrap();
        let b = train(&cfg, &ds, &all).unwrap();
        assert_eq!(a.classifier.to_bytes(), b.classifier.to_bytes());
        assert_eq!(history_json(&a.history), history_json(&b.history));
        assert_eq!(a.history[2].lr, a.history[1].lr / 5.0);
        assert_eq!(a.history[1].lr, 1e-3);
        cfg.train.seed = 1;
        let c = train(&cfg, &ds, &all).unwrap();
        assert_ne!(a.classifier.to_bytes(), c.classifier.to_bytes());
    }

    #[test]
    fn divergence_is_reported_with_position() {
        let ds = blob_dataset(2, 3, 18, 3).unwrap();
        let mut cfg = tiny_config(2);
        cfg.train.lr = 1e30;
        cfg.train.augment = AugmentConfig::none();
        let all: Vec<usize> = (0..ds.len()).collect();
        match train(&cfg, &ds, &all) {
            Err(Error::Training { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn evaluation_checks_classes_and_counts_samples() {
        let ds = blob_dataset(3, 2, 18, 4).unwrap();
        let cfg = tiny_config(1);
        let out = train(&cfg, &ds, &[0, 2, 4]).unwrap();
        let one = evaluate(&out.classifier, &ds, &[1]).unwrap();
        let nonzero = one.report.confusion_matrix.iter().flatten().filter(|&&v| v > 0).count();
        assert_eq!(nonzero, 1);
        assert!(one.report.top_k.contains_key("3"));
        let other = blob_dataset(2, 2, 18, 4).unwrap();
        assert!(matches!(evaluate(&out.classifier, &other, &[0]), Err(Error::ClassMismatch { .. })));
    }

    #[test]
    fn cross_validation_has_a_row_per_fold_and_an_average() {
        let ds = blob_dataset(2, 6, 18, 5).unwrap();
        let plan = split_train_test(&ds.labels(), 0.7, 0).unwrap();
        let plan = kfold_split(&plan, 3, 0).unwrap();
        let mut seen = 0;
        let cv = cross_validate(&tiny_config(1), &ds, &plan, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 3);
        assert_eq!(cv.folds.len(), 3);
        let mean = cv.folds.iter().map(|f| f.validation.accuracy).sum::<f64>() / 3.0;
        assert!((cv.avg.validation.accuracy - mean).abs() < 1e-12);
        assert!(cv.avg.test.is_some());
    }
}
