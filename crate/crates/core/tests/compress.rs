//! Compression-harness integration on the toy teacher: distillation,
//! pruning with synthetic fine-tuning, and from-scratch training.

mod common;

use classinv::classifier::ClassifierSpec;
use classinv::compress::{
    distill, finetune_pruned, l1_prune, synth_dataset, train_from_scratch, DistillConfig,
    PruneConfig, ScratchConfig,
};
use classinv::data::Provenance;
use classinv::engine::{run_inversion, InversionConfig};

use common::{toy_corpus, trained_toy_teacher};

fn toy_synth(teacher: &classinv::classifier::ClassifierHandle, epochs: usize) -> classinv::data::Dataset {
    let config = InversionConfig {
        batch_size: 16,
        num_batches: 2,
        epochs,
        master_seed: 5,
        ..InversionConfig::default()
    };
    let batches = run_inversion(teacher, &config).unwrap();
    synth_dataset(&batches, teacher.num_classes()).unwrap()
}

#[test]
fn distill_runs_and_reports() {
    let teacher = trained_toy_teacher(20);
    let synth = toy_synth(&teacher, 120);
    let real_test = toy_corpus(80, 900);
    let mut cfg = DistillConfig::new(ClassifierSpec::toy(4), 3);
    cfg.epochs = 6;
    let (student, report) = distill(&teacher, &cfg, &synth, &real_test).unwrap();
    assert_eq!(student.num_classes(), 4);
    assert!(report.test.accuracy >= 0.0 && report.test.accuracy <= 1.0);
    assert!(report.final_loss.is_finite());
    assert_eq!(report.images_used, 32);
}

#[test]
fn distill_is_deterministic() {
    let teacher = trained_toy_teacher(21);
    let synth = toy_synth(&teacher, 60);
    let real_test = toy_corpus(40, 901);
    let mut cfg = DistillConfig::new(ClassifierSpec::toy(4), 4);
    cfg.epochs = 3;
    let (a, ra) = distill(&teacher, &cfg, &synth, &real_test).unwrap();
    let (b, rb) = distill(&teacher, &cfg, &synth, &real_test).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(ra.test.accuracy, rb.test.accuracy);
}

#[test]
fn finetune_zero_epochs_is_identity() {
    let teacher = trained_toy_teacher(22);
    let synth = toy_synth(&teacher, 40);
    let real_test = toy_corpus(40, 902);
    let mut pruned = l1_prune(&teacher, 0.5).unwrap();
    let cfg = PruneConfig {
        finetune_epochs: 0,
        seed: 1,
        ..PruneConfig::default()
    };
    let report = finetune_pruned(&mut pruned, &synth, &real_test, &cfg).unwrap();
    assert_eq!(report.before.accuracy, report.after.accuracy);
    assert_eq!(report.before.mean_loss, report.after.mean_loss);
}

#[test]
fn finetune_is_deterministic_and_trains() {
    let teacher = trained_toy_teacher(23);
    let synth = toy_synth(&teacher, 80);
    let real_test = toy_corpus(60, 903);
    let cfg = PruneConfig {
        ratio: 0.5,
        finetune_epochs: 4,
        seed: 2,
        ..PruneConfig::default()
    };
    let run = || {
        let mut pruned = l1_prune(&teacher, cfg.ratio).unwrap();
        let r = finetune_pruned(&mut pruned, &synth, &real_test, &cfg).unwrap();
        (pruned.model.digest(), r)
    };
    let (da, ra) = run();
    let (db, rb) = run();
    assert_eq!(da, db);
    assert_eq!(ra.after.accuracy, rb.after.accuracy);
}

#[test]
fn scratch_zero_epochs_is_chance_level() {
    let teacher = trained_toy_teacher(24);
    let synth = toy_synth(&teacher, 30);
    let real_train = toy_corpus(80, 904);
    let real_test = toy_corpus(80, 905);
    let cfg = ScratchConfig {
        epochs: 0,
        seed: 3,
        ..ScratchConfig::default()
    };
    let (_, report) =
        train_from_scratch(&ClassifierSpec::toy(4), &synth, &real_train, &real_test, &cfg).unwrap();
    assert!(
        (report.real_train.accuracy - 0.25).abs() < 0.2,
        "untrained accuracy {}",
        report.real_train.accuracy
    );
}

#[test]
fn scratch_rejects_real_provenance() {
    let real = toy_corpus(32, 906);
    assert_eq!(real.provenance, Provenance::Real);
    let cfg = ScratchConfig::default();
    let err = train_from_scratch(&ClassifierSpec::toy(4), &real, &real, &real, &cfg).unwrap_err();
    assert!(matches!(err, classinv::Error::Config(_)));
}

#[test]
fn finetune_rejects_real_provenance() {
    let teacher = trained_toy_teacher(25);
    let real = toy_corpus(32, 907);
    let mut pruned = l1_prune(&teacher, 0.3).unwrap();
    let err = finetune_pruned(&mut pruned, &real, &real, &PruneConfig::default()).unwrap_err();
    assert!(matches!(err, classinv::Error::Config(_)));
}

#[test]
fn prune_sweep_shrinks_filters_monotonically() {
    let teacher = trained_toy_teacher(26);
    let mut previous_kept = usize::MAX;
    for ratio in [0.5, 0.6, 0.7, 0.8, 0.9] {
        let pruned = l1_prune(&teacher, ratio).unwrap();
        let kept: usize = pruned.masks.iter().map(|m| m.kept.len()).sum();
        assert!(kept < previous_kept, "kept {kept} at ratio {ratio}");
        previous_kept = kept;
        for m in &pruned.masks {
            let expect_removed = (ratio * m.norms.len() as f64).floor() as usize;
            assert_eq!(m.removed.len(), expect_removed, "{} at {ratio}", m.layer);
        }
    }
}
