//! Downstream consumers of synthesized images: knowledge distillation,
//! L1-norm filter pruning with synthetic fine-tuning, and from-scratch
//! training. Every optimizer step in this module runs on synthesized data
//! only; real splits appear exclusively inside evaluation calls.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::classifier::{
    build_classifier, evaluate_accuracy, train_classifier_with, ClassifierHandle, ClassifierSpec,
    EvalReport, PruneMask, TrainSettings,
};
use crate::data::{epoch_batches, Dataset, Provenance};
use crate::engine::SynthBatch;
use crate::losses::inception_loss_grad;
use crate::nn::{Adam, BnMode, Sgd};
use crate::util::derive_seed;
use crate::{Error, Result};

/// Collects synthesized batches into one training dataset.
pub fn synth_dataset(batches: &[SynthBatch], num_classes: usize) -> Result<Dataset> {
    if batches.is_empty() {
        return Err(Error::Config("no synthesized batches".into()));
    }
    let (_, c, h, w) = batches[0].images.dim();
    let total: usize = batches.iter().map(|b| b.labels.len()).sum();
    let mut images = Array4::zeros((total, c, h, w));
    let mut labels = Vec::with_capacity(total);
    let mut at = 0;
    for batch in batches {
        let n = batch.labels.len();
        images
            .slice_mut(ndarray::s![at..at + n, .., .., ..])
            .assign(&batch.images);
        labels.extend_from_slice(&batch.labels);
        at += n;
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        provenance: Provenance::Synthesized,
        normalization: crate::data::CANONICAL_NORMALIZATION,
    })
}

fn ensure_synthetic(data: &Dataset, harness: &str) -> Result<()> {
    if data.provenance != Provenance::Synthesized {
        return Err(Error::Config(format!(
            "{harness} trains on synthesized data only; got a dataset tagged {:?}",
            data.provenance
        )));
    }
    Ok(())
}

/// Knowledge-distillation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub student: ClassifierSpec,
    /// Softmax temperature for the soft targets.
    pub temperature: f64,
    /// Weight of the soft loss; the rest goes to hard argmax targets.
    pub soft_mix: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig::new(ClassifierSpec::desk_resnet(10), 0)
    }
}

impl DistillConfig {
    pub fn new(student: ClassifierSpec, seed: u64) -> Self {
        DistillConfig {
            student,
            temperature: 4.0,
            soft_mix: 0.9,
            epochs: 20,
            lr: 1.0e-3,
            batch_size: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.soft_mix) {
            return Err(Error::Config(format!(
                "soft_mix must be in [0,1], got {}",
                self.soft_mix
            )));
        }
        self.student.validate()
    }
}

fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v / temperature);
    for mut row in out.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Distillation loss and its gradient w.r.t. the student logits:
/// `mix * T^2 * KL(soft_teacher || soft_student) + (1-mix) * CE(student,
/// argmax teacher)`, batch-mean.
pub fn distill_loss_grad(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    temperature: f64,
    soft_mix: f64,
) -> Result<(f64, Array2<f64>)> {
    if student_logits.dim() != teacher_logits.dim() {
        return Err(Error::shape(
            "distillation logits",
            format!("{:?}", teacher_logits.dim()),
            format!("{:?}", student_logits.dim()),
        ));
    }
    let b = student_logits.nrows() as f64;
    let ps = softmax_rows(student_logits, temperature);
    let pt = softmax_rows(teacher_logits, temperature);
    let mut soft = 0.0;
    for (rs, rt) in ps.outer_iter().zip(pt.outer_iter()) {
        for (s, t) in rs.iter().zip(rt.iter()) {
            if *t > 0.0 {
                soft += t * (t.ln() - s.ln());
            }
        }
    }
    soft = soft * temperature * temperature / b;
    // d/ds of the soft term: T * (softmax(s/T) - softmax(t/T)) / B.
    let mut grad = (&ps - &pt) * (temperature / b) * soft_mix;

    let hard_labels: Vec<usize> = teacher_logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect();
    let (hard, d_hard) = inception_loss_grad(student_logits, &hard_labels)?;
    grad.scaled_add(1.0 - soft_mix, &d_hard);
    Ok((soft_mix * soft + (1.0 - soft_mix) * hard, grad))
}

/// Distillation result: the frozen student and its real-test evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillReport {
    pub test: EvalReport,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub images_used: usize,
}

/// Trains a student from teacher soft targets on synthesized images; real
/// test data is used for evaluation only.
pub fn distill(
    teacher: &ClassifierHandle,
    config: &DistillConfig,
    synth: &Dataset,
    real_test: &Dataset,
) -> Result<(ClassifierHandle, DistillReport)> {
    config.validate()?;
    let student = build_classifier(&config.student, derive_seed(config.seed, 1))?;
    distill_with_student(teacher, config, synth, real_test, student)
}

/// [`distill`] with a caller-provided student (e.g. a copy of the teacher
/// for the zero-initial-loss smoke check).
pub fn distill_with_student(
    teacher: &ClassifierHandle,
    config: &DistillConfig,
    synth: &Dataset,
    real_test: &Dataset,
    mut student: ClassifierHandle,
) -> Result<(ClassifierHandle, DistillReport)> {
    config.validate()?;
    ensure_synthetic(synth, "distillation")?;
    if synth.is_empty() {
        return Err(Error::Config("synthesized set is empty".into()));
    }
    let mut teacher_session = teacher.session();
    let mut opt = Adam::new(config.lr);

    // Diagnostic: the distillation loss before any update, with the student
    // in inference mode (a student cloned from the teacher reports exactly 0).
    let initial_loss = {
        let idx: Vec<usize> = (0..synth.len().min(config.batch_size)).collect();
        let (images, _) = synth.select(&idx);
        let t_logits = teacher_session.forward(&images)?.logits;
        let net = student.net_mut();
        net.set_mode(BnMode::Eval);
        let (s_logits, _) = net.forward_taps(&images)?;
        distill_loss_grad(&s_logits, &t_logits, config.temperature, config.soft_mix)?.0
    };

    let mut final_loss = initial_loss;
    {
        let net = student.net_mut();
        net.set_mode(BnMode::Train);
        for epoch in 0..config.epochs {
            let batches = epoch_batches(
                synth.len(),
                config.batch_size,
                derive_seed(config.seed, 100 + epoch as u64),
            );
            for idx in &batches {
                let (images, _) = synth.select(idx);
                let t_logits = teacher_session.forward(&images)?.logits;
                let (s_logits, _) = net.forward_taps(&images)?;
                let (loss, d_logits) =
                    distill_loss_grad(&s_logits, &t_logits, config.temperature, config.soft_mix)?;
                final_loss = loss;
                for p in net.params_mut() {
                    p.zero_grad();
                }
                net.backward_taps(Some(&d_logits), None, None, true);
                opt.step(&mut net.params_mut());
            }
        }
        net.set_mode(BnMode::Eval);
    }
    let test = evaluate_accuracy(&student, real_test, config.batch_size)?;
    let report = DistillReport {
        test,
        initial_loss,
        final_loss,
        images_used: synth.len(),
    };
    Ok((student, report))
}

/// Pruning and fine-tuning settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Fraction of filters removed per prunable layer, in [0, 1).
    pub ratio: f64,
    /// Rank filters within each layer (the only supported scope).
    pub local: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            ratio: 0.7,
            local: true,
            finetune_epochs: 20,
            finetune_lr: 1.0e-3,
            finetune_momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("ratio must be in [0,1), got {}", self.ratio)));
        }
        if !self.local {
            return Err(Error::Config("only per-layer local pruning is supported".into()));
        }
        Ok(())
    }
}

/// A pruned classifier with the per-layer mask report.
#[derive(Debug, Clone)]
pub struct PrunedModel {
    pub model: ClassifierHandle,
    pub masks: Vec<PruneMask>,
}

/// Removes the smallest-L1 filters of every prunable layer and rewires
/// downstream shapes; ratio 0 returns a bit-identical model.
pub fn l1_prune(model: &ClassifierHandle, ratio: f64) -> Result<PrunedModel> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("ratio must be in [0,1), got {ratio}")));
    }
    let mut pruned = model.clone();
    let masks = pruned.net_mut().l1_prune(ratio)?;
    Ok(PrunedModel {
        model: pruned,
        masks,
    })
}

/// Accuracy before and after synthetic fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub before: EvalReport,
    pub after: EvalReport,
}

/// Fine-tunes a pruned model on synthesized images; reports real-test
/// accuracy before and after.
pub fn finetune_pruned(
    pruned: &mut PrunedModel,
    synth: &Dataset,
    real_test: &Dataset,
    config: &PruneConfig,
) -> Result<FinetuneReport> {
    config.validate()?;
    ensure_synthetic(synth, "pruned-model fine-tuning")?;
    let before = evaluate_accuracy(&pruned.model, real_test, config.batch_size)?;
    {
        let net = pruned.model.net_mut();
        net.set_mode(BnMode::Train);
        let mut opt = Sgd::new(config.finetune_lr, config.finetune_momentum);
        for epoch in 0..config.finetune_epochs {
            let batches = epoch_batches(
                synth.len(),
                config.batch_size,
                derive_seed(config.seed, 200 + epoch as u64),
            );
            for idx in &batches {
                let (images, labels) = synth.select(idx);
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
    let after = evaluate_accuracy(&pruned.model, real_test, config.batch_size)?;
    Ok(FinetuneReport { before, after })
}

/// From-scratch training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScratchConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ScratchConfig {
    fn default() -> Self {
        ScratchConfig {
            epochs: 200,
            lr: 0.05,
            batch_size: 128,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Accuracy and loss of a scratch-trained model on the real splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScratchReport {
    pub real_train: EvalReport,
    pub real_test: EvalReport,
}

/// Trains a randomly initialized model on synthesized images only, then
/// forwards the real train/test splits for scoring.
pub fn train_from_scratch(
    spec: &ClassifierSpec,
    synth: &Dataset,
    real_train: &Dataset,
    real_test: &Dataset,
    config: &ScratchConfig,
) -> Result<(ClassifierHandle, ScratchReport)> {
    ensure_synthetic(synth, "from-scratch training")?;
    let handle = build_classifier(spec, derive_seed(config.seed, 1))?;
    let settings = TrainSettings {
        epochs: config.epochs,
        lr: config.lr,
        batch_size: config.batch_size,
        momentum: config.momentum,
        seed: derive_seed(config.seed, 2),
    };
    let (trained, _) = train_classifier_with(handle, synth, None, &settings)?;
    let real_train_eval = evaluate_accuracy(&trained, real_train, config.batch_size)?;
    let real_test_eval = evaluate_accuracy(&trained, real_test, config.batch_size)?;
    Ok((
        trained,
        ScratchReport {
            real_train: real_train_eval,
            real_test: real_test_eval,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::build_classifier;

    fn toy_teacher() -> ClassifierHandle {
        build_classifier(&ClassifierSpec::toy(4), 7).unwrap()
    }

    fn fake_synth(n: usize, classes: usize, res: usize, seed: u64) -> Dataset {
        let imgs = crate::nn::init::standard_normal(&mut crate::nn::init::seeded_rng(seed), &[n, 3, res, res])
            .into_dimensionality()
            .unwrap();
        Dataset {
            images: imgs,
            labels: (0..n).map(|i| i % classes).collect(),
            num_classes: classes,
            provenance: Provenance::Synthesized,
            normalization: crate::data::CANONICAL_NORMALIZATION,
        }
    }

    #[test]
    fn distill_identical_nets_zero_loss_and_grad() {
        let teacher = toy_teacher();
        let logits = ndarray::arr2(&[[2.0, -1.0, 0.5, 0.0], [0.1, 0.2, 0.3, 0.4]]);
        let (loss, grad) = distill_loss_grad(&logits, &logits, 1.0, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
        let _ = teacher;
    }

    #[test]
    fn distill_tau_one_hard_only_is_plain_ce() {
        let s = ndarray::arr2(&[[0.3, -0.4, 1.1, 0.0]]);
        let t = ndarray::arr2(&[[5.0, 0.0, 0.0, 0.0]]);
        let (loss, grad) = distill_loss_grad(&s, &t, 1.0, 0.0).unwrap();
        let (ce, d) = inception_loss_grad(&s, &[0]).unwrap();
        assert!((loss - ce).abs() < 1e-12);
        assert!(grad.iter().zip(d.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn harness_rejects_real_training_data() {
        let teacher = toy_teacher();
        let mut data = fake_synth(8, 4, 8, 1);
        data.provenance = Provenance::Real;
        let cfg = DistillConfig::new(ClassifierSpec::toy(4), 0);
        let err = distill(&teacher, &cfg, &data, &data).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn prune_mask_oracles() {
        // Norms (3, 1, 2), ratio 1/3 -> drop index 1.
        let (kept, removed) = crate::classifier::l1_keep_set(&[3.0, 1.0, 2.0], 1.0 / 3.0).unwrap();
        assert_eq!(kept, vec![0, 2]);
        assert_eq!(removed, vec![1]);
        // Norms (4, 3, 2, 1), ratio 0.5 -> keep {0, 1}.
        let (kept, removed) = crate::classifier::l1_keep_set(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(removed, vec![2, 3]);
        // Ties break toward the lower index.
        let (kept, _) = crate::classifier::l1_keep_set(&[1.0, 1.0, 1.0], 1.0 / 3.0).unwrap();
        assert_eq!(kept, vec![0, 1]);
        // floor(ratio*n) with ratio < 1 always leaves a survivor; removing
        // everything only happens at ratio >= 1, which both layers reject.
        assert!(crate::classifier::l1_keep_set(&[1.0, 2.0], 1.0).is_err());
        assert!(l1_prune(&toy_teacher(), 1.0).is_err());
    }

    #[test]
    fn prune_ratio_zero_is_bit_identical() {
        let teacher = toy_teacher();
        let pruned = l1_prune(&teacher, 0.0).unwrap();
        assert_eq!(teacher.digest(), pruned.model.digest());
        let imgs = fake_synth(4, 4, 8, 3).images;
        let (a, _, _) = teacher.forward_with_taps(&imgs).unwrap();
        let (b, _, _) = pruned.model.forward_with_taps(&imgs).unwrap();
        assert_eq!(a, b);
        assert!(pruned.masks.iter().all(|m| m.removed.is_empty()));
    }

    #[test]
    fn prune_rewires_shapes_and_still_runs() {
        let teacher = toy_teacher();
        let pruned = l1_prune(&teacher, 0.5).unwrap();
        let imgs = fake_synth(2, 4, 8, 4).images;
        let (logits, _, _) = pruned.model.forward_with_taps(&imgs).unwrap();
        assert_eq!(logits.dim(), (2, 4));
        assert!(pruned.masks.iter().any(|m| !m.removed.is_empty()));
        for m in &pruned.masks {
            let n = m.norms.len();
            assert_eq!(m.removed.len(), (0.5 * n as f64).floor() as usize);
        }
    }
}
