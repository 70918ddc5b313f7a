//! Shared fixtures for the integration suites.

use classinv::classifier::{
    build_classifier, train_classifier_with, ClassifierHandle, ClassifierSpec, TrainSettings,
};
use classinv::data::{shapes_corpus, Dataset};

/// 4-class 8x8 corpus.
pub fn toy_corpus(size: usize, seed: u64) -> Dataset {
    shapes_corpus(4, 8, size, seed).unwrap()
}

/// A small trained 8x8 teacher for trend and engine tests.
pub fn trained_toy_teacher(seed: u64) -> ClassifierHandle {
    let spec = ClassifierSpec::toy(4);
    let handle = build_classifier(&spec, seed).unwrap();
    let train = toy_corpus(256, 1000 + seed);
    let settings = TrainSettings {
        epochs: 8,
        lr: 0.01,
        batch_size: 32,
        momentum: 0.9,
        seed,
    };
    let (handle, _) = train_classifier_with(handle, &train, None, &settings).unwrap();
    handle
}

/// An untrained toy teacher (fresh BN statistics).
pub fn fresh_toy_teacher(seed: u64) -> ClassifierHandle {
    build_classifier(&ClassifierSpec::toy(4), seed).unwrap()
}
