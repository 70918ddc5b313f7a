//! Procedurally generated image corpus and dataset plumbing.
//!
//! The corpus is a 10-class shape/color set rendered at any square
//! resolution. It is deterministic given a seed, ships with the repository
//! (no downloads), and is easy enough that a small batch-normalized CNN
//! reaches high accuracy in a few epochs — which is all the synthesis
//! pipeline needs from its frozen classifier.

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::nn::init::seeded_rng;
use crate::util::derive_seed;
use crate::{Error, Result};
use rand::Rng;

/// Where a dataset's images came from. Training harnesses that must stay
/// data-free refuse `Real` inputs; evaluation helpers accept both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthesized,
}

/// Per-channel normalization applied to every image fed to a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Canonical constants for the shipped corpus: display space is [0,1],
/// normalized space is (x - 0.5) / 0.25.
pub const CANONICAL_NORMALIZATION: Normalization = Normalization {
    mean: [0.5, 0.5, 0.5],
    std: [0.25, 0.25, 0.25],
};

impl Normalization {
    /// Maps a normalized pixel back to display space (unclamped).
    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }

    pub fn normalize(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }
}

/// A labelled image set in normalized space.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: Provenance,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.dim().2
    }

    /// Copies out the rows at `indices` as a minibatch.
    pub fn select(&self, indices: &[usize]) -> (Array4<f64>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            out.index_axis_mut(Axis(0), row)
                .assign(&self.images.index_axis(Axis(0), i));
            labels.push(self.labels[i]);
        }
        (out, labels)
    }
}

/// Deterministic shuffled index batches for one training epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed);
    // Fisher-Yates with the seeded stream.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

/// Class table: (shape, base RGB in display space).
const CLASS_TABLE: [(Shape, [f64; 3]); 10] = [
    (Shape::Disk, [0.90, 0.15, 0.15]),
    (Shape::Square, [0.15, 0.85, 0.20]),
    (Shape::Triangle, [0.20, 0.30, 0.90]),
    (Shape::Ring, [0.90, 0.85, 0.15]),
    (Shape::Cross, [0.85, 0.20, 0.85]),
    (Shape::Disk, [0.15, 0.85, 0.85]),
    (Shape::Square, [0.95, 0.55, 0.10]),
    (Shape::Triangle, [0.55, 0.20, 0.80]),
    (Shape::Ring, [0.10, 0.55, 0.50]),
    (Shape::Cross, [0.95, 0.95, 0.95]),
];

/// Renders a deterministic shape/color corpus.
///
/// Labels cycle through the classes so every split is balanced up to one
/// image. `num_classes` must be in 1..=10.
pub fn shapes_corpus(
    num_classes: usize,
    resolution: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || num_classes > CLASS_TABLE.len() {
        return Err(Error::Config(format!(
            "shapes corpus supports 1..=10 classes, got {num_classes}"
        )));
    }
    if resolution < 8 {
        return Err(Error::Config(format!(
            "shapes corpus needs resolution >= 8, got {resolution}"
        )));
    }
    let norm = CANONICAL_NORMALIZATION;
    let mut images = Array4::zeros((size, 3, resolution, resolution));
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let label = i % num_classes;
        let mut rng = seeded_rng(derive_seed(seed, i as u64));
        let mut img = images.index_axis_mut(Axis(0), i);
        render_class(&mut img, label, resolution, &mut rng);
        // To normalized space.
        for ch in 0..3 {
            img.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| norm.normalize(ch, v));
        }
        labels.push(label);
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        provenance: Provenance::Real,
        normalization: norm,
    })
}

fn render_class(
    img: &mut ndarray::ArrayViewMut3<'_, f64>,
    label: usize,
    res: usize,
    rng: &mut rand_chacha::ChaCha20Rng,
) {
    let (shape, base) = CLASS_TABLE[label];
    let r = res as f64;
    // Background: random dark tint plus pixel noise.
    let bg: [f64; 3] = [
        0.12 + rng.gen::<f64>() * 0.16,
        0.12 + rng.gen::<f64>() * 0.16,
        0.12 + rng.gen::<f64>() * 0.16,
    ];
    // Shape geometry jitter.
    let cx = r * (0.40 + rng.gen::<f64>() * 0.20);
    let cy = r * (0.40 + rng.gen::<f64>() * 0.20);
    let radius = r * (0.24 + rng.gen::<f64>() * 0.14);
    let brightness = 0.85 + rng.gen::<f64>() * 0.15;
    let color: [f64; 3] = [
        (base[0] * brightness).clamp(0.0, 1.0),
        (base[1] * brightness).clamp(0.0, 1.0),
        (base[2] * brightness).clamp(0.0, 1.0),
    ];

    for y in 0..res {
        for x in 0..res {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match shape {
                Shape::Disk => dx * dx + dy * dy <= radius * radius,
                Shape::Square => dx.abs().max(dy.abs()) <= radius * 0.85,
                Shape::Triangle => {
                    // Point-up triangle: width grows linearly downward.
                    let t = (dy + radius) / (2.0 * radius);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * radius * 0.95
                }
                Shape::Ring => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= radius * radius && d2 >= (radius * 0.55) * (radius * 0.55)
                }
                Shape::Cross => {
                    let arm = radius * 0.38;
                    (dx.abs() <= arm && dy.abs() <= radius)
                        || (dy.abs() <= arm && dx.abs() <= radius)
                }
            };
            for ch in 0..3 {
                let noise = (rng.gen::<f64>() - 0.5) * 0.10;
                let v = if inside { color[ch] } else { bg[ch] } + noise;
                img[[ch, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
}
