//! Supervised training and evaluation for the classifier families.

use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, Dataset};
use crate::losses::inception_loss_grad;
use crate::nn::{BnMode, Sgd};
use crate::util::derive_seed;
use crate::{Error, Result};

use super::{AccuracyReport, ClassifierHandle};

/// Accuracy and mean cross-entropy over one dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        TrainSettings {
            epochs,
            lr,
            batch_size: 64,
            momentum: 0.9,
            seed,
        }
    }
}

fn check_dataset(handle: &ClassifierHandle, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.resolution() != handle.spec.input_resolution {
        return Err(Error::shape(
            "dataset resolution",
            handle.spec.input_resolution,
            data.resolution(),
        ));
    }
    if data.labels.iter().any(|&l| l >= handle.spec.num_classes) {
        return Err(Error::Config(
            "dataset labels exceed classifier class count".into(),
        ));
    }
    Ok(())
}

/// Accuracy and mean loss of a frozen classifier on a split.
pub fn evaluate_accuracy(
    handle: &ClassifierHandle,
    data: &Dataset,
    batch_size: usize,
) -> Result<EvalReport> {
    check_dataset(handle, data)?;
    let mut net = handle.net().clone();
    net.set_mode(BnMode::Eval);
    let n = data.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut at = 0;
    while at < n {
        let hi = (at + batch_size.max(1)).min(n);
        let idx: Vec<usize> = (at..hi).collect();
        let (images, labels) = data.select(&idx);
        let (logits, _) = net.forward_taps(&images)?;
        for (row, &label) in logits.outer_iter().zip(labels.iter()) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
        let (ce, _) = inception_loss_grad(&logits, &labels)?;
        loss_sum += ce * labels.len() as f64;
        at = hi;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        mean_loss: loss_sum / n as f64,
    })
}

/// Trains a classifier with momentum SGD and freezes it.
///
/// The returned handle carries a train/test accuracy report; BN running
/// statistics reflect the training stream. Deterministic in (handle, data,
/// settings): epoch shuffles derive from the given seed.
pub fn train_classifier(
    handle: ClassifierHandle,
    train: &Dataset,
    test: Option<&Dataset>,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ClassifierHandle, AccuracyReport)> {
    train_classifier_with(handle, train, test, &TrainSettings::new(epochs, lr, seed))
}

pub fn train_classifier_with(
    mut handle: ClassifierHandle,
    train: &Dataset,
    test: Option<&Dataset>,
    settings: &TrainSettings,
) -> Result<(ClassifierHandle, AccuracyReport)> {
    check_dataset(&handle, train)?;
    if settings.lr <= 0.0 || !settings.lr.is_finite() {
        return Err(Error::Config(format!("learning rate must be positive, got {}", settings.lr)));
    }
    {
        let net = handle.net_mut();
        net.set_mode(BnMode::Train);
        let mut opt = Sgd::new(settings.lr, settings.momentum);
        for epoch in 0..settings.epochs {
            let batches = epoch_batches(
                train.len(),
                settings.batch_size,
                derive_seed(settings.seed, epoch as u64),
            );
            for idx in &batches {
                let (images, labels) = train.select(idx);
                let (logits, _) = net.forward_taps(&images)?;
                let (_, d_logits) = inception_loss_grad(&logits, &labels)?;
                for p in net.params_mut() {
                    p.zero_grad();
                }
                net.backward_taps(Some(&d_logits), None, None, true);
                opt.step(&mut net.params_mut());
            }
        }
        net.set_mode(BnMode::Eval);
    }
    let train_eval = evaluate_accuracy(&handle, train, settings.batch_size)?;
    let test_eval = match test {
        Some(t) => Some(evaluate_accuracy(&handle, t, settings.batch_size)?),
        None => None,
    };
    let report = AccuracyReport {
        train_accuracy: train_eval.accuracy,
        train_loss: train_eval.mean_loss,
        test_accuracy: test_eval.map(|e| e.accuracy),
        test_loss: test_eval.map(|e| e.mean_loss),
        epochs: settings.epochs,
    };
    handle.accuracy = Some(report);
    Ok((handle, report))
}
