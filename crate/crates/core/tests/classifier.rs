//! Classifier integration: shape ladders, statistics alignment, training
//! oracles, and checkpoint round trips.

mod common;

use classinv::classifier::{
    build_classifier, load_checkpoint, save_checkpoint, train_classifier, ClassifierSpec, Family,
};
use classinv::data::shapes_corpus;
use ndarray::Array4;

use common::toy_corpus;

#[test]
fn reference_resnet_tap_ladder() {
    let handle = build_classifier(&ClassifierSpec::reference_resnet(10), 7).unwrap();
    let images = Array4::zeros((4, 3, 32, 32));
    let (logits, pyramid, stats) = handle.forward_with_taps(&images).unwrap();
    assert_eq!(logits.dim(), (4, 10));
    let dims: Vec<_> = pyramid.maps.iter().map(|m| m.dim()).collect();
    assert_eq!(
        dims,
        vec![(4, 64, 32, 32), (4, 128, 16, 16), (4, 256, 8, 8), (4, 512, 4, 4)]
    );
    assert_eq!(pyramid.tap_names, vec!["stage1", "stage2", "stage3", "stage4"]);
    assert_eq!(stats.num_layers(), handle.num_bn_layers());
}

#[test]
fn vgg_tap_ladder_halves_per_stage() {
    let handle = build_classifier(&ClassifierSpec::desk_vgg(10), 7).unwrap();
    let images = Array4::zeros((2, 3, 32, 32));
    let (_, pyramid, _) = handle.forward_with_taps(&images).unwrap();
    let dims: Vec<_> = pyramid.maps.iter().map(|m| m.dim()).collect();
    assert_eq!(
        dims,
        vec![(2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4)]
    );
}

#[test]
fn zero_input_stays_finite() {
    let handle = build_classifier(&ClassifierSpec::toy(4), 1).unwrap();
    let images = Array4::zeros((3, 3, 8, 8));
    let (logits, _, stats) = handle.forward_with_taps(&images).unwrap();
    assert!(logits.iter().all(|v| v.is_finite()));
    for i in 0..stats.num_layers() {
        assert!(stats.means[i].iter().all(|v| v.is_finite()));
        assert!(stats.vars[i].iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn fresh_handle_has_unit_running_stats() {
    let handle = build_classifier(&ClassifierSpec::toy(4), 2).unwrap();
    let running = handle.bn_running_stats();
    assert_eq!(running.num_layers(), handle.num_bn_layers());
    for i in 0..running.num_layers() {
        assert!(running.means[i].iter().all(|&v| v == 0.0));
        assert!(running.vars[i].iter().all(|&v| v == 1.0));
    }
}

#[test]
fn build_is_deterministic_and_validates() {
    let spec = ClassifierSpec::toy(4);
    let a = build_classifier(&spec, 7).unwrap();
    let b = build_classifier(&spec, 7).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), build_classifier(&spec, 8).unwrap().digest());

    let mut bad = spec.clone();
    bad.num_classes = 0;
    assert!(build_classifier(&bad, 0).is_err());
    let mut bad = spec.clone();
    bad.stage_channels.clear();
    assert!(build_classifier(&bad, 0).is_err());
    let mut bad = spec;
    bad.input_resolution = 9;
    assert!(build_classifier(&bad, 0).is_err());
}

#[test]
fn stats_and_running_stats_align_per_layer() {
    let handle = build_classifier(&ClassifierSpec::desk_resnet(10), 3).unwrap();
    let images = Array4::zeros((2, 3, 32, 32));
    let (_, _, stats) = handle.forward_with_taps(&images).unwrap();
    let running = handle.bn_running_stats();
    assert_eq!(stats.num_layers(), running.num_layers());
    for i in 0..stats.num_layers() {
        assert_eq!(stats.means[i].len(), running.means[i].len(), "layer {i}");
    }
}

#[test]
fn pyramid_batch_constant_and_spatial_decreasing() {
    let handle = build_classifier(&ClassifierSpec::desk_resnet(10), 3).unwrap();
    let images = Array4::zeros((5, 3, 32, 32));
    let (_, pyramid, _) = handle.forward_with_taps(&images).unwrap();
    pyramid.validate().unwrap();
    assert!(pyramid.maps.iter().all(|m| m.dim().0 == 5));
}

#[test]
fn forward_rejects_wrong_resolution() {
    let handle = build_classifier(&ClassifierSpec::toy(4), 1).unwrap();
    let images = Array4::zeros((2, 3, 16, 16));
    assert!(handle.forward_with_taps(&images).is_err());
}

#[test]
fn training_reaches_high_train_accuracy() {
    // Pinned baseline on the 10-class 32x32 corpus, 2k images: this seedful
    // run reached 1.00 train / 1.00 test by epoch 4, so 5 epochs with a 0.90
    // gate leaves real margin.
    let spec = ClassifierSpec {
        family: Family::ResnetLike,
        stage_channels: vec![8, 16, 32, 64],
        num_classes: 10,
        input_resolution: 32,
        normalization: classinv::data::CANONICAL_NORMALIZATION,
        blocks_per_stage: 1,
    };
    let handle = build_classifier(&spec, 7).unwrap();
    let train = shapes_corpus(10, 32, 2000, 11).unwrap();
    let test = shapes_corpus(10, 32, 400, 12).unwrap();
    let (_, report) = train_classifier(handle, &train, Some(&test), 5, 0.01, 5).unwrap();
    assert!(
        report.train_accuracy >= 0.90,
        "train accuracy {}",
        report.train_accuracy
    );
    assert!(report.test_accuracy.unwrap() >= 0.80, "test accuracy {:?}", report.test_accuracy);
}

#[test]
fn zero_epochs_is_chance_and_training_is_deterministic() {
    let spec = ClassifierSpec::toy(4);
    let train = toy_corpus(160, 21);
    let handle = build_classifier(&spec, 5).unwrap();
    let (_, r0) = train_classifier(handle, &train, None, 0, 0.01, 5).unwrap();
    assert!(
        (r0.train_accuracy - 0.25).abs() < 0.2,
        "untrained accuracy {} far from chance",
        r0.train_accuracy
    );

    let run = || {
        let h = build_classifier(&spec, 5).unwrap();
        let (h, r) = train_classifier(h, &train, None, 4, 0.01, 9).unwrap();
        (h.digest(), r.train_accuracy)
    };
    let (da, aa) = run();
    let (db, ab) = run();
    assert_eq!(da, db);
    assert_eq!(aa, ab);
}

#[test]
fn training_moves_running_statistics() {
    let spec = ClassifierSpec::toy(4);
    let train = toy_corpus(128, 31);
    let handle = build_classifier(&spec, 6).unwrap();
    let (trained, _) = train_classifier(handle, &train, None, 3, 0.01, 6).unwrap();
    let running = trained.bn_running_stats();
    let moved = running
        .means
        .iter()
        .any(|m| m.iter().any(|&v| v.abs() > 1e-6));
    assert!(moved, "running means never left zero");
}

#[test]
fn dataset_resolution_mismatch_is_shape_error() {
    let handle = build_classifier(&ClassifierSpec::toy(4), 1).unwrap();
    let wrong = shapes_corpus(4, 16, 32, 0).unwrap();
    assert!(train_classifier(handle, &wrong, None, 1, 0.01, 0).is_err());
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ClassifierSpec::toy(4);
    let train = toy_corpus(96, 41);
    let handle = build_classifier(&spec, 9).unwrap();
    let (trained, _) = train_classifier(handle, &train, None, 2, 0.01, 9).unwrap();

    let sidecar = save_checkpoint(&trained, dir.path(), "teacher").unwrap();
    let json1 = std::fs::read(&sidecar).unwrap();
    let bin1 = std::fs::read(dir.path().join("teacher.params.bin")).unwrap();

    let loaded = load_checkpoint(&sidecar).unwrap();
    assert_eq!(loaded.digest(), trained.digest());
    assert_eq!(loaded.accuracy, trained.accuracy);

    save_checkpoint(&loaded, dir.path(), "teacher").unwrap();
    assert_eq!(json1, std::fs::read(&sidecar).unwrap());
    assert_eq!(bin1, std::fs::read(dir.path().join("teacher.params.bin")).unwrap());

    // Loaded model computes the same outputs.
    let images = toy_corpus(8, 42).images;
    let (a, _, _) = trained.forward_with_taps(&images).unwrap();
    let (b, _, _) = loaded.forward_with_taps(&images).unwrap();
    assert_eq!(a, b);
}
