//! Feature Transfer Pyramid: a sub-generator that fuses the teacher's
//! multi-scale feature maps into enhancement maps and composes the final
//! pre-scale image with the generator output.
//!
//! Block 1 upsamples the deepest tap and projects it down one width; each
//! later block sums the previous enhancement map with the same-scale tap,
//! applies a 3x3 conv, upsamples (except the last block) and projects with a
//! 1x1 conv. The output block sums the last map with the generator output and
//! applies a 1x1 conv plus tanh (the sum-only composition is available as a
//! config mode).

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierSpec, FeaturePyramid};
use crate::nn::init::seeded_rng;
use crate::nn::{Conv2d, Param, Tanh, upsample_nearest_2x, upsample_nearest_2x_backward};
use crate::{Error, Result};

/// How [`compose_output`] combines the last enhancement map with the
/// generator output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ComposeMode {
    /// 1x1 conv (3 -> 3) then tanh on the elementwise sum.
    #[default]
    ConvTanh,
    /// Elementwise sum only.
    Sum,
}

#[derive(Debug, Clone)]
struct FtpBlock {
    conv3: Option<Conv2d>,
    conv1: Conv2d,
    upsample: bool,
}

/// Trainable pyramid parameters; block widths derive from the teacher's tap
/// channels (deep to shallow, then down to 3 image channels).
#[derive(Debug, Clone)]
pub struct FtpState {
    blocks: Vec<FtpBlock>,
    out_conv: Conv2d,
    out_tanh: Tanh,
    pub compose_mode: ComposeMode,
    tap_channels: Vec<usize>,
    pub seed: u64,
    compose_cache: Option<(usize, usize)>,
}

/// Ordered enhancement maps `m_1..m_L`, coarse to image scale; the last map
/// has image shape (batch, 3, H, W).
#[derive(Debug, Clone)]
pub struct EnhancementMaps {
    pub maps: Vec<Array4<f64>>,
}

impl EnhancementMaps {
    pub fn last(&self) -> &Array4<f64> {
        self.maps.last().expect("at least two blocks")
    }
}

/// Builds an FTP for a teacher spec; needs at least two taps.
pub fn init_ftp(spec: &ClassifierSpec, seed: u64, compose_mode: ComposeMode) -> Result<FtpState> {
    let taps = &spec.stage_channels;
    let n = taps.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "feature pyramid needs at least 2 taps, teacher has {n}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut blocks = Vec::with_capacity(n);
    for j in 0..n {
        let width = taps[n - 1 - j];
        let conv3 = if j == 0 {
            None
        } else {
            Some(Conv2d::new(width, width, 3, 1, 1, &mut rng))
        };
        let out_width = if j + 1 == n { 3 } else { taps[n - 2 - j] };
        blocks.push(FtpBlock {
            conv3,
            conv1: Conv2d::new(width, out_width, 1, 1, 0, &mut rng),
            upsample: j + 1 != n,
        });
    }
    Ok(FtpState {
        blocks,
        out_conv: Conv2d::new(3, 3, 1, 1, 0, &mut rng),
        out_tanh: Tanh::new(),
        compose_mode,
        tap_channels: taps.clone(),
        seed,
        compose_cache: None,
    })
}

/// Runs the pyramid over a teacher feature pyramid.
pub fn ftp_forward(state: &mut FtpState, pyramid: &FeaturePyramid) -> Result<EnhancementMaps> {
    let n = state.blocks.len();
    if pyramid.maps.len() != n {
        return Err(Error::shape("pyramid taps", n, pyramid.maps.len()));
    }
    for (i, map) in pyramid.maps.iter().enumerate() {
        if map.dim().1 != state.tap_channels[i] {
            return Err(Error::shape(
                "tap channels",
                state.tap_channels[i],
                map.dim().1,
            ));
        }
    }
    let mut maps: Vec<Array4<f64>> = Vec::with_capacity(n);
    for (j, block) in state.blocks.iter_mut().enumerate() {
        let input = if j == 0 {
            pyramid.maps[n - 1].clone()
        } else {
            let f = &pyramid.maps[n - 1 - j];
            let prev = maps.last().expect("previous block output");
            if prev.dim() != f.dim() {
                return Err(Error::shape(
                    "enhancement/tap sum",
                    format!("{:?}", f.dim()),
                    format!("{:?}", prev.dim()),
                ));
            }
            prev + f
        };
        let h = match &mut block.conv3 {
            Some(conv) => conv.forward(&input)?,
            None => input,
        };
        let h = if block.upsample { upsample_nearest_2x(&h) } else { h };
        maps.push(block.conv1.forward(&h)?);
    }
    Ok(EnhancementMaps { maps })
}

/// Backward through the last [`ftp_forward`]: takes dL/dm_L, accumulates
/// parameter gradients, and returns dL/df per tap (shallow to deep).
pub fn ftp_backward(state: &mut FtpState, d_last: &Array4<f64>) -> Vec<Array4<f64>> {
    let n = state.blocks.len();
    let mut d_taps: Vec<Option<Array4<f64>>> = vec![None; n];
    let mut g = d_last.clone();
    for j in (0..n).rev() {
        let block = &mut state.blocks[j];
        let mut gi = block.conv1.backward(&g, true);
        if block.upsample {
            gi = upsample_nearest_2x_backward(&gi);
        }
        if let Some(conv) = &mut block.conv3 {
            gi = conv.backward(&gi, true);
        }
        if j == 0 {
            d_taps[n - 1] = Some(gi);
        } else {
            // The sum node routes the same gradient to the tap and to the
            // previous block's output.
            d_taps[n - 1 - j] = Some(gi.clone());
            g = gi;
        }
    }
    d_taps
        .into_iter()
        .map(|d| d.expect("every tap visited"))
        .collect()
}

/// Composes the pre-scale image from the last enhancement map and the
/// generator output.
pub fn compose_output(
    state: &mut FtpState,
    m_last: &Array4<f64>,
    gen_output: &Array4<f64>,
) -> Result<Array4<f64>> {
    if m_last.dim() != gen_output.dim() {
        return Err(Error::shape(
            "compose inputs",
            format!("{:?}", gen_output.dim()),
            format!("{:?}", m_last.dim()),
        ));
    }
    let sum = m_last + gen_output;
    state.compose_cache = Some((sum.dim().0, sum.dim().2));
    match state.compose_mode {
        ComposeMode::ConvTanh => {
            let h = state.out_conv.forward(&sum)?;
            Ok(state.out_tanh.forward(&h))
        }
        ComposeMode::Sum => Ok(sum),
    }
}

/// Backward through the last [`compose_output`]: returns the gradient shared
/// by both inputs (the sum node sends the same tensor to each).
pub fn compose_backward(state: &mut FtpState, d_out: &Array4<f64>) -> Array4<f64> {
    assert!(state.compose_cache.is_some(), "compose backward before forward");
    match state.compose_mode {
        ComposeMode::ConvTanh => {
            let g = state.out_tanh.backward(d_out);
            state.out_conv.backward(&g, true)
        }
        ComposeMode::Sum => d_out.clone(),
    }
}

impl FtpState {
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for block in &mut self.blocks {
            if let Some(conv) = &mut block.conv3 {
                v.extend(conv.params_mut());
            }
            v.extend(block.conv1.params_mut());
        }
        v.extend(self.out_conv.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for block in &self.blocks {
            if let Some(conv) = &block.conv3 {
                v.extend(conv.params());
            }
            v.extend(block.conv1.params());
        }
        v.extend(self.out_conv.params());
        v
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Zeroes every block's closing 1x1 conv, making all enhancement maps
    /// identically zero (the "no pyramid" ablation).
    pub fn zero_final_convs(&mut self) {
        for block in &mut self.blocks {
            block.conv1.weight.value.fill(0.0);
            block.conv1.bias.value.fill(0.0);
        }
    }

    /// Sets the output conv to the identity map with zero bias.
    pub fn identity_out_conv(&mut self) {
        self.out_conv.weight.value.fill(0.0);
        for c in 0..3 {
            self.out_conv.weight.value[[c, c, 0, 0]] = 1.0;
        }
        self.out_conv.bias.value.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{build_classifier, ClassifierSpec};

    fn reference_pyramid(batch: usize) -> (ClassifierSpec, FeaturePyramid) {
        let spec = ClassifierSpec::reference_resnet(10);
        let handle = build_classifier(&spec, 0).unwrap();
        let images = Array4::zeros((batch, 3, 32, 32));
        let (_, pyramid, _) = handle.forward_with_taps(&images).unwrap();
        (spec, pyramid)
    }

    #[test]
    fn reference_shape_ladder() {
        let (spec, pyramid) = reference_pyramid(2);
        let mut ftp = init_ftp(&spec, 1, ComposeMode::ConvTanh).unwrap();
        let maps = ftp_forward(&mut ftp, &pyramid).unwrap();
        let dims: Vec<_> = maps.maps.iter().map(|m| m.dim()).collect();
        assert_eq!(
            dims,
            vec![(2, 256, 8, 8), (2, 128, 16, 16), (2, 64, 32, 32), (2, 3, 32, 32)]
        );
    }

    #[test]
    fn rejects_single_tap_teacher() {
        let mut spec = ClassifierSpec::toy(4);
        spec.stage_channels = vec![8];
        assert!(init_ftp(&spec, 0, ComposeMode::ConvTanh).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ClassifierSpec::toy(4);
        let a = init_ftp(&spec, 5, ComposeMode::ConvTanh).unwrap();
        let b = init_ftp(&spec, 5, ComposeMode::ConvTanh).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn zeroed_final_convs_zero_every_map() {
        let (spec, pyramid) = reference_pyramid(1);
        let mut ftp = init_ftp(&spec, 2, ComposeMode::ConvTanh).unwrap();
        ftp.zero_final_convs();
        let maps = ftp_forward(&mut ftp, &pyramid).unwrap();
        for m in &maps.maps {
            assert!(m.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_dimension_preserved() {
        let (spec, pyramid) = reference_pyramid(3);
        let mut ftp = init_ftp(&spec, 3, ComposeMode::ConvTanh).unwrap();
        let maps = ftp_forward(&mut ftp, &pyramid).unwrap();
        assert!(maps.maps.iter().all(|m| m.dim().0 == 3));
    }

    #[test]
    fn compose_zero_inputs_identity_conv_gives_zero_image() {
        let spec = ClassifierSpec::toy(4);
        let mut ftp = init_ftp(&spec, 0, ComposeMode::ConvTanh).unwrap();
        ftp.identity_out_conv();
        let z = Array4::zeros((2, 3, 8, 8));
        let out = compose_output(&mut ftp, &z, &z).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_output_is_bounded() {
        let spec = ClassifierSpec::toy(4);
        let mut ftp = init_ftp(&spec, 0, ComposeMode::ConvTanh).unwrap();
        let m = Array4::from_elem((2, 3, 8, 8), 4.0);
        let g = Array4::from_elem((2, 3, 8, 8), -3.0);
        let out = compose_output(&mut ftp, &m, &g).unwrap();
        assert!(out.iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn compose_shape_mismatch_is_error() {
        let spec = ClassifierSpec::toy(4);
        let mut ftp = init_ftp(&spec, 0, ComposeMode::ConvTanh).unwrap();
        let m = Array4::zeros((2, 3, 8, 8));
        let g = Array4::zeros((2, 3, 16, 16));
        assert!(compose_output(&mut ftp, &m, &g).is_err());
    }

    #[test]
    fn sum_mode_skips_conv_and_tanh() {
        let spec = ClassifierSpec::toy(4);
        let mut ftp = init_ftp(&spec, 0, ComposeMode::Sum).unwrap();
        let m = Array4::from_elem((1, 3, 8, 8), 2.0);
        let g = Array4::from_elem((1, 3, 8, 8), 1.0);
        let out = compose_output(&mut ftp, &m, &g).unwrap();
        assert!(out.iter().all(|&v| v == 3.0));
    }
}
