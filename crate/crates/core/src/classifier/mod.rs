//! Building, training, persisting and serving the frozen CNN classifiers
//! that anchor synthesis: they expose per-stage feature taps, captured batch
//! statistics and stored running statistics, and stay immutable once trained.

mod checkpoint;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointSidecar};
pub use train::{
    evaluate_accuracy, train_classifier, train_classifier_with, EvalReport, TrainSettings,
};

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::nn::BnMode;
use crate::util::TensorDigest;
use crate::{Error, Result};

pub use net::l1_keep_set;
pub(crate) use net::TeacherNet;

/// Classifier families with one feature tap per spatial stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ResnetLike,
    VggLike,
}

/// Architecture description for [`build_classifier`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub family: Family,
    /// Channel count per spatial stage; stage s runs at resolution / 2^s.
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    /// Square input resolution in pixels.
    pub input_resolution: usize,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    /// Conv (VGG) or residual-block (ResNet) count per stage.
    #[serde(default = "default_blocks_per_stage")]
    pub blocks_per_stage: usize,
}

fn default_blocks_per_stage() -> usize {
    1
}

fn default_normalization() -> Normalization {
    crate::data::CANONICAL_NORMALIZATION
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("stage_channels must be non-empty".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be positive".into()));
        }
        let down = 1usize << (self.stage_channels.len() - 1);
        if self.input_resolution == 0 || self.input_resolution % down != 0 {
            return Err(Error::Config(format!(
                "input_resolution {} must be a positive multiple of {down}",
                self.input_resolution
            )));
        }
        if self.input_resolution / down < 2 {
            return Err(Error::Config(format!(
                "input_resolution {} leaves no spatial extent after {} stages",
                self.input_resolution,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }

    pub fn tap_names(&self) -> Vec<String> {
        (1..=self.stage_channels.len())
            .map(|i| format!("stage{i}"))
            .collect()
    }

    /// The 4-stage residual reference family (taps 64/128/256/512 at 32px).
    pub fn reference_resnet(num_classes: usize) -> Self {
        ClassifierSpec {
            family: Family::ResnetLike,
            stage_channels: vec![64, 128, 256, 512],
            num_classes,
            input_resolution: 32,
            normalization: crate::data::CANONICAL_NORMALIZATION,
            blocks_per_stage: 1,
        }
    }

    /// Small residual classifier that trains in seconds on the shipped corpus.
    pub fn desk_resnet(num_classes: usize) -> Self {
        ClassifierSpec {
            family: Family::ResnetLike,
            stage_channels: vec![16, 32, 64, 128],
            num_classes,
            input_resolution: 32,
            normalization: crate::data::CANONICAL_NORMALIZATION,
            blocks_per_stage: 1,
        }
    }

    /// Small VGG-style classifier at the same tap schedule.
    pub fn desk_vgg(num_classes: usize) -> Self {
        ClassifierSpec {
            family: Family::VggLike,
            stage_channels: vec![16, 32, 64, 128],
            num_classes,
            input_resolution: 32,
            normalization: crate::data::CANONICAL_NORMALIZATION,
            blocks_per_stage: 1,
        }
    }

    /// Tiny two-stage teacher for 8x8 trend experiments.
    pub fn toy(num_classes: usize) -> Self {
        ClassifierSpec {
            family: Family::ResnetLike,
            stage_channels: vec![8, 16],
            num_classes,
            input_resolution: 8,
            normalization: crate::data::CANONICAL_NORMALIZATION,
            blocks_per_stage: 1,
        }
    }
}

/// Per-BN-layer running statistics of a trained classifier, ordered by
/// construction so they align index-wise with [`LayerBatchStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunningStats {
    pub means: Vec<Array1<f64>>,
    pub vars: Vec<Array1<f64>>,
}

impl BnRunningStats {
    pub fn num_layers(&self) -> usize {
        self.means.len()
    }
}

/// Per-BN-layer batch statistics captured at the input of every BN layer
/// during one forward pass (biased variance over batch and spatial axes).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBatchStats {
    pub means: Vec<Array1<f64>>,
    pub vars: Vec<Array1<f64>>,
}

impl LayerBatchStats {
    pub fn num_layers(&self) -> usize {
        self.means.len()
    }
}

/// Ordered multi-scale feature maps extracted at the downsampling points.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `maps[0]` is the shallowest (largest) map.
    pub maps: Vec<Array4<f64>>,
    pub tap_names: Vec<String>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::Config("empty feature pyramid".into()));
        }
        let batch = self.maps[0].dim().0;
        for pair in self.maps.windows(2) {
            let (a, b) = (pair[0].dim(), pair[1].dim());
            if b.0 != batch {
                return Err(Error::shape("pyramid batch", batch, b.0));
            }
            if b.2 >= a.2 || b.3 >= a.3 {
                return Err(Error::shape(
                    "pyramid spatial order",
                    format!("strictly decreasing from {}x{}", a.2, a.3),
                    format!("{}x{}", b.2, b.3),
                ));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.dim().1).collect()
    }
}

/// Accuracy and loss of a classifier on train/test splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub epochs: usize,
}

/// Mask record of one pruned conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub layer: String,
    pub norms: Vec<f64>,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

/// A trained, frozen classifier with named feature taps.
///
/// Nothing outside this module can mutate the parameters; synthesis and
/// evaluation run on cloned sessions, so a handle is safe to share across
/// concurrent episodes.
#[derive(Debug, Clone)]
pub struct ClassifierHandle {
    pub spec: ClassifierSpec,
    pub tap_names: Vec<String>,
    pub accuracy: Option<AccuracyReport>,
    pub build_seed: u64,
    net: TeacherNet,
}

/// Builds an untrained classifier with deterministic parameters and fresh BN
/// running statistics (mean 0, variance 1).
pub fn build_classifier(spec: &ClassifierSpec, seed: u64) -> Result<ClassifierHandle> {
    let net = TeacherNet::from_spec(spec, seed)?;
    Ok(ClassifierHandle {
        spec: spec.clone(),
        tap_names: spec.tap_names(),
        accuracy: None,
        build_seed: seed,
        net,
    })
}

impl ClassifierHandle {
    /// Differentiable forward pass: logits, feature pyramid and captured
    /// batch statistics from the same pass.
    pub fn forward_with_taps(
        &self,
        images: &Array4<f64>,
    ) -> Result<(Array2<f64>, FeaturePyramid, LayerBatchStats)> {
        let mut session = self.session();
        let out = session.forward(images)?;
        let pyramid = FeaturePyramid {
            maps: out.taps,
            tap_names: self.tap_names.clone(),
        };
        pyramid.validate()?;
        Ok((out.logits, pyramid, out.stats))
    }

    /// Read-only snapshot of the stored running statistics, index-aligned
    /// with [`LayerBatchStats`].
    pub fn bn_running_stats(&self) -> BnRunningStats {
        let layers = self.net.bn_layers();
        BnRunningStats {
            means: layers.iter().map(|bn| bn.running_mean.clone()).collect(),
            vars: layers.iter().map(|bn| bn.running_var.clone()).collect(),
        }
    }

    /// Clones the frozen network into a stateful forward/backward session.
    pub fn session(&self) -> TeacherSession {
        let mut net = self.net.clone();
        net.set_mode(BnMode::Eval);
        let running = BnRunningStats {
            means: net.bn_layers().iter().map(|bn| bn.running_mean.clone()).collect(),
            vars: net.bn_layers().iter().map(|bn| bn.running_var.clone()).collect(),
        };
        TeacherSession {
            net,
            running,
            resolution: self.spec.input_resolution,
            forwarded: false,
        }
    }

    /// SHA-256 over parameters and running statistics; the immutability
    /// witness used by tests and manifests.
    pub fn digest(&self) -> String {
        let mut d = TensorDigest::new();
        for p in self.net.params() {
            d.update(&p.value);
        }
        for bn in self.net.bn_layers() {
            d.update(&bn.running_mean);
            d.update(&bn.running_var);
        }
        d.finish()
    }

    pub fn num_bn_layers(&self) -> usize {
        self.net.bn_layers().len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn resolution(&self) -> usize {
        self.spec.input_resolution
    }

    /// Channel width of each tap, shallow to deep.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.spec.stage_channels.clone()
    }

    pub(crate) fn net(&self) -> &TeacherNet {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut TeacherNet {
        &mut self.net
    }

    pub(crate) fn from_parts(
        spec: ClassifierSpec,
        build_seed: u64,
        accuracy: Option<AccuracyReport>,
        net: TeacherNet,
    ) -> Self {
        let tap_names = spec.tap_names();
        ClassifierHandle {
            spec,
            tap_names,
            accuracy,
            build_seed,
            net,
        }
    }
}

/// Output of one differentiable teacher pass.
#[derive(Debug, Clone)]
pub struct SessionOutput {
    pub logits: Array2<f64>,
    pub taps: Vec<Array4<f64>>,
    pub stats: LayerBatchStats,
}

/// A cloned, eval-mode copy of a frozen classifier that supports backward
/// passes without ever touching the handle it came from.
#[derive(Debug, Clone)]
pub struct TeacherSession {
    net: TeacherNet,
    running: BnRunningStats,
    resolution: usize,
    forwarded: bool,
}

impl TeacherSession {
    pub fn forward(&mut self, images: &Array4<f64>) -> Result<SessionOutput> {
        let (b, c, h, w) = images.dim();
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::shape(
                "teacher input",
                format!("{b}x3x{0}x{0}", self.resolution),
                format!("{b}x{c}x{h}x{w}"),
            ));
        }
        let (logits, taps) = self.net.forward_taps(images)?;
        let layers = self.net.bn_layers();
        let stats = LayerBatchStats {
            means: layers.iter().map(|bn| bn.batch_mean.clone()).collect(),
            vars: layers.iter().map(|bn| bn.batch_var.clone()).collect(),
        };
        self.forwarded = true;
        Ok(SessionOutput { logits, taps, stats })
    }

    /// Backward through the last forward pass. Gradients may be injected at
    /// the logits, at each tap, and at each BN layer's captured batch
    /// statistics; returns the gradient w.r.t. the input images. Teacher
    /// parameters receive no gradient.
    pub fn backward(
        &mut self,
        d_logits: Option<&Array2<f64>>,
        d_taps: Option<&[Array4<f64>]>,
        stat_grads: Option<&[(Array1<f64>, Array1<f64>)]>,
    ) -> Array4<f64> {
        assert!(self.forwarded, "session backward before forward");
        self.net.backward_taps(d_logits, d_taps, stat_grads, false)
    }

    /// Stored running statistics of the underlying classifier.
    pub fn running_stats(&self) -> &BnRunningStats {
        &self.running
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }
}

