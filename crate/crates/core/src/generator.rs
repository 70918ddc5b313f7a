//! The per-batch conditional generator.
//!
//! One generator instance serves exactly one batch-synthesis episode: its
//! latent batch is drawn once and frozen, only the parameters move, and the
//! next episode starts from a fresh draw of both.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::nn::init::{seeded_rng, standard_normal};
use crate::nn::{
    upsample_nearest_2x, upsample_nearest_2x_backward, BatchNorm2d, Conv2d, LeakyRelu, Linear,
    Param,
};
use crate::util::derive_seed;
use crate::{Error, Result};
use rand::Rng;

/// Width of the latent vector `z`.
pub const LATENT_DIM: usize = 1024;

/// How target labels are assigned to a latent batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPolicy {
    /// Round-robin over the classes; class counts differ by at most one.
    Balanced,
    /// Independent uniform draws.
    UniformRandom,
}

/// A frozen latent batch: `z ~ N(0,1)` rows plus target labels.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LatentBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Concatenated generator input: `[z | one_hot(y)]`, width 1024 + C.
    pub fn input(&self) -> Array2<f64> {
        let b = self.batch_size();
        let c = self.num_classes;
        let mut x = Array2::zeros((b, LATENT_DIM + c));
        x.slice_mut(ndarray::s![.., ..LATENT_DIM]).assign(&self.z);
        for (n, &label) in self.labels.iter().enumerate() {
            x[[n, LATENT_DIM + label]] = 1.0;
        }
        x
    }
}

/// Draws a fresh latent batch.
pub fn sample_latent(
    batch_size: usize,
    num_classes: usize,
    policy: LabelPolicy,
    seed: u64,
) -> LatentBatch {
    let mut rng = seeded_rng(derive_seed(seed, 0x1a7e));
    let z = standard_normal(&mut rng, &[batch_size, LATENT_DIM])
        .into_dimensionality()
        .expect("2-D draw");
    let labels = match policy {
        LabelPolicy::Balanced => (0..batch_size).map(|i| i % num_classes).collect(),
        LabelPolicy::UniformRandom => (0..batch_size)
            .map(|_| rng.gen_range(0..num_classes))
            .collect(),
    };
    LatentBatch {
        z,
        labels,
        num_classes,
    }
}

/// Trainable generator parameters plus the episode seed they came from.
///
/// Architecture: linear to a 128-channel base grid, two BN+LeakyReLU(0.2)
/// blocks with nearest 2x upsampling, a 64-channel block, and a 3-channel
/// output conv. The base grid is resolution/4 so the output matches the
/// teacher's input resolution.
#[derive(Debug, Clone)]
pub struct GeneratorState {
    linear: Linear,
    bn0: BatchNorm2d,
    act0: LeakyRelu,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act1: LeakyRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    act2: LeakyRelu,
    conv_out: Conv2d,
    base: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub seed: u64,
}

/// Builds a fresh generator with deterministic parameters.
pub fn init_generator(num_classes: usize, resolution: usize, seed: u64) -> Result<GeneratorState> {
    if num_classes == 0 {
        return Err(Error::Config("generator needs at least one class".into()));
    }
    if resolution < 8 || resolution % 4 != 0 {
        return Err(Error::Config(format!(
            "generator resolution must be a multiple of 4 and >= 8, got {resolution}"
        )));
    }
    let base = resolution / 4;
    let mut rng = seeded_rng(seed);
    Ok(GeneratorState {
        linear: Linear::new(LATENT_DIM + num_classes, 128 * base * base, &mut rng),
        bn0: BatchNorm2d::new(128),
        act0: LeakyRelu::new(0.2),
        conv1: Conv2d::new(128, 128, 3, 1, 1, &mut rng),
        bn1: BatchNorm2d::new(128),
        act1: LeakyRelu::new(0.2),
        conv2: Conv2d::new(128, 64, 3, 1, 1, &mut rng),
        bn2: BatchNorm2d::new(64),
        act2: LeakyRelu::new(0.2),
        conv_out: Conv2d::new(64, 3, 3, 1, 1, &mut rng),
        base,
        resolution,
        num_classes,
        seed,
    })
}

/// Fresh re-draw for the next episode; the old state is left untouched.
pub fn reinitialize(state: &GeneratorState, new_seed: u64) -> GeneratorState {
    init_generator(state.num_classes, state.resolution, new_seed)
        .expect("dimensions already validated")
}

/// Maps a latent batch to images of shape (batch, 3, R, R).
///
/// BN layers run on batch statistics, so the output is a deterministic
/// function of (parameters, latent) alone.
pub fn generate(state: &mut GeneratorState, latent: &LatentBatch) -> Result<Array4<f64>> {
    if latent.num_classes != state.num_classes {
        return Err(Error::shape(
            "latent classes",
            state.num_classes,
            latent.num_classes,
        ));
    }
    let b = latent.batch_size();
    let x = state.linear.forward(&latent.input())?;
    let x = x
        .into_shape_with_order((b, 128, state.base, state.base))
        .expect("linear output reshapes to base grid");
    let x = state.bn0.forward(&x)?;
    let x = state.act0.forward(&x);
    let x = upsample_nearest_2x(&x);
    let x = state.conv1.forward(&x)?;
    let x = state.bn1.forward(&x)?;
    let x = state.act1.forward(&x);
    let x = upsample_nearest_2x(&x);
    let x = state.conv2.forward(&x)?;
    let x = state.bn2.forward(&x)?;
    let x = state.act2.forward(&x);
    state.conv_out.forward(&x)
}

/// Backward through the last [`generate`] call, accumulating parameter
/// gradients.
pub fn generate_backward(state: &mut GeneratorState, d_out: &Array4<f64>) {
    let g = state.conv_out.backward(d_out, true);
    let g = state.act2.backward(&g);
    let g = state.bn2.backward(&g, true);
    let g = state.conv2.backward(&g, true);
    let g = upsample_nearest_2x_backward(&g);
    let g = state.act1.backward(&g);
    let g = state.bn1.backward(&g, true);
    let g = state.conv1.backward(&g, true);
    let g = upsample_nearest_2x_backward(&g);
    let g = state.act0.backward(&g);
    let g = state.bn0.backward(&g, true);
    let b = g.dim().0;
    let g = g
        .into_shape_with_order((b, 128 * state.base * state.base))
        .expect("grid flattens back to linear width");
    state.linear.backward(&g, true);
}

impl GeneratorState {
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.linear.params_mut());
        v.extend(self.bn0.params_mut());
        v.extend(self.conv1.params_mut());
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.conv_out.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        v.extend(self.linear.params());
        v.extend(self.bn0.params());
        v.extend(self.conv1.params());
        v.extend(self.bn1.params());
        v.extend(self.conv2.params());
        v.extend(self.bn2.params());
        v.extend(self.conv_out.params());
        v
    }

    /// Width of the expected concatenated input.
    pub fn input_width(&self) -> usize {
        LATENT_DIM + self.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_generator(10, 32, 3).unwrap();
        let b = init_generator(10, 32, 3).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn different_seeds_differ_almost_everywhere() {
        let a = init_generator(10, 32, 3).unwrap();
        let b = init_generator(10, 32, 4).unwrap();
        let (mut same, mut total) = (0usize, 0usize);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            // Biases and BN affine parameters start at fixed values; compare
            // the randomly drawn tensors.
            if pa.value.ndim() < 2 {
                continue;
            }
            total += pa.len();
            same += pa
                .value
                .iter()
                .zip(pb.value.iter())
                .filter(|(x, y)| x == y)
                .count();
        }
        assert!(total > 0);
        assert!((same as f64) < 0.01 * total as f64, "{same}/{total} entries equal");
    }

    #[test]
    fn input_width_tracks_classes() {
        let g = init_generator(100, 32, 0).unwrap();
        assert_eq!(g.input_width(), 1124);
        assert!(init_generator(0, 32, 0).is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut g = init_generator(10, 32, 9).unwrap();
        let latent = sample_latent(8, 10, LabelPolicy::Balanced, 5);
        let a = generate(&mut g, &latent).unwrap();
        assert_eq!(a.dim(), (8, 3, 32, 32));
        let b = generate(&mut g, &latent).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toy_resolution_output() {
        let mut g = init_generator(4, 8, 1).unwrap();
        let latent = sample_latent(3, 4, LabelPolicy::Balanced, 2);
        let img = generate(&mut g, &latent).unwrap();
        assert_eq!(img.dim(), (3, 3, 8, 8));
    }

    #[test]
    fn balanced_labels_round_robin() {
        let l = sample_latent(256, 10, LabelPolicy::Balanced, 0);
        for c in 0..10 {
            let count = l.labels.iter().filter(|&&x| x == c).count();
            assert!(count == 25 || count == 26, "class {c} count {count}");
        }
    }

    #[test]
    fn latent_mean_is_small() {
        let l = sample_latent(256, 10, LabelPolicy::Balanced, 123);
        let mean = l.z.mean().unwrap();
        assert!(mean.abs() < 0.05, "latent mean {mean}");
    }

    #[test]
    fn latent_is_seed_deterministic() {
        let a = sample_latent(16, 10, LabelPolicy::UniformRandom, 7);
        let b = sample_latent(16, 10, LabelPolicy::UniformRandom, 7);
        assert_eq!(a.z, b.z);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn reinitialize_contract() {
        let g = init_generator(4, 8, 11).unwrap();
        let fresh = reinitialize(&g, 11);
        for (pa, pb) in g.params().iter().zip(fresh.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let other = reinitialize(&g, 12);
        let latent = sample_latent(2, 4, LabelPolicy::Balanced, 3);
        let ia = generate(&mut g.clone(), &latent).unwrap();
        let ib = generate(&mut other.clone(), &latent).unwrap();
        let diff = (&ia - &ib).mapv(f64::abs).mean().unwrap();
        assert!(diff > 0.0);
        // Original state parameters untouched by reinitialization.
        for (pa, pb) in g.params().iter().zip(init_generator(4, 8, 11).unwrap().params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
