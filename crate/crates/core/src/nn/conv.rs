use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha20Rng;

use super::init::scaled_normal;
use super::param::Param;
use crate::{Error, Result};

/// 2-D convolution over NCHW tensors with square kernels and zero padding.
///
/// Forward caches the im2col matrix so backward can form the weight gradient
/// with one GEMM; call order is therefore forward-then-backward per pass.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param, // (out, in, k, k)
    pub bias: Param,   // (out,)
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug)]
struct ConvCache {
    cols: Array2<f64>,
    out_mat: Array2<f64>,
    gy_mat: Array2<f64>,
    d_cols: Array2<f64>,
    batch: usize,
    input_hw: (usize, usize),
    output_hw: (usize, usize),
}

// Scratch buffers are sized to the last forward pass and excluded from
// clones, so cloned layer stacks start lean.
impl Clone for ConvCache {
    fn clone(&self) -> Self {
        ConvCache {
            cols: Array2::zeros((0, 0)),
            out_mat: Array2::zeros((0, 0)),
            gy_mat: Array2::zeros((0, 0)),
            d_cols: Array2::zeros((0, 0)),
            batch: 0,
            input_hw: (0, 0),
            output_hw: (0, 0),
        }
    }
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(scaled_normal(
            rng,
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
        ));
        let bias = Param::zeros(&[out_channels]);
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel;
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::shape(
                "conv2d",
                format!("spatial >= {k}x{k} after padding"),
                format!("{h}x{w}"),
            ));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, cin, h, w) = x.dim();
        if cin != self.in_channels {
            return Err(Error::shape("conv2d input channels", self.in_channels, cin));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        let cik = self.in_channels * self.kernel * self.kernel;
        let ncols = b * oh * ow;

        // Reuse scratch buffers when the shapes repeat (the common case in
        // a training loop); large fresh allocations dominate otherwise.
        let reuse = matches!(&self.cache, Some(c) if c.cols.dim() == (cik, ncols));
        if !reuse {
            self.cache = Some(ConvCache {
                cols: Array2::zeros((cik, ncols)),
                out_mat: Array2::zeros((self.out_channels, ncols)),
                gy_mat: Array2::zeros((self.out_channels, ncols)),
                d_cols: Array2::zeros((cik, ncols)),
                batch: b,
                input_hw: (h, w),
                output_hw: (oh, ow),
            });
        }
        let cache = self.cache.as_mut().expect("cache just ensured");
        cache.batch = b;
        cache.input_hw = (h, w);
        cache.output_hw = (oh, ow);
        im2col(x, self.kernel, self.stride, self.padding, oh, ow, &mut cache.cols);
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, cik))
            .expect("conv weight contiguous");
        general_mat_mul(1.0, &w_mat, &cache.cols, 0.0, &mut cache.out_mat);

        let mut y = Array4::zeros((b, self.out_channels, oh, ow));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            let os = cache.out_mat.as_slice().expect("standard layout");
            let bias = self.bias.value.as_slice().expect("bias contiguous");
            let plane = oh * ow;
            for n in 0..b {
                for o in 0..self.out_channels {
                    let dst = &mut ys[(n * self.out_channels + o) * plane..][..plane];
                    let src = &os[o * b * plane + n * plane..][..plane];
                    let bo = bias[o];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s + bo;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Backpropagates `gy`; accumulates weight/bias gradients when
    /// `param_grads` is set (a frozen network skips that work).
    pub fn backward(&mut self, gy: &Array4<f64>, param_grads: bool) -> Array4<f64> {
        let cache = self.cache.as_mut().expect("conv backward before forward");
        let (b, (oh, ow)) = (cache.batch, cache.output_hw);
        let plane = oh * ow;
        let cik = self.in_channels * self.kernel * self.kernel;

        // (out, b*oh*ow) with the same column order as im2col.
        {
            let gm = cache.gy_mat.as_slice_mut().expect("standard layout");
            let gs = gy.as_slice().expect("standard layout");
            for n in 0..b {
                for o in 0..self.out_channels {
                    let src = &gs[(n * self.out_channels + o) * plane..][..plane];
                    let dst = &mut gm[o * b * plane + n * plane..][..plane];
                    dst.copy_from_slice(src);
                }
            }
        }

        if param_grads {
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_channels, cik))
                .expect("conv grad contiguous");
            general_mat_mul(1.0, &cache.gy_mat, &cache.cols.t(), 1.0, &mut wg);
            let db = cache.gy_mat.sum_axis(ndarray::Axis(1));
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_shape_with_order(self.out_channels)
                .expect("bias grad contiguous");
            bg += &db;
        }

        let w_mat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, cik))
            .expect("conv weight contiguous");
        general_mat_mul(1.0, &w_mat.t(), &cache.gy_mat, 0.0, &mut cache.d_cols);
        col2im(
            &cache.d_cols,
            b,
            self.in_channels,
            cache.input_hw,
            self.kernel,
            self.stride,
            self.padding,
            (oh, ow),
        )
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    /// Keeps only the listed output filters (ascending, deduplicated).
    pub fn prune_out_channels(&mut self, keep: &[usize]) {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight 4-D");
        let mut new_w = Array4::zeros((keep.len(), self.in_channels, self.kernel, self.kernel));
        let mut new_b = Array1::zeros(keep.len());
        for (row, &o) in keep.iter().enumerate() {
            new_w
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&w.index_axis(ndarray::Axis(0), o));
            new_b[row] = self.bias.value[[o]];
        }
        self.out_channels = keep.len();
        self.weight = Param::new(new_w.into_dyn());
        self.bias = Param::new(new_b.into_dyn());
        self.cache = None;
    }

    /// Keeps only the listed input channels (ascending, deduplicated).
    pub fn prune_in_channels(&mut self, keep: &[usize]) {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight 4-D");
        let mut new_w = Array4::zeros((self.out_channels, keep.len(), self.kernel, self.kernel));
        for (col, &i) in keep.iter().enumerate() {
            new_w
                .index_axis_mut(ndarray::Axis(1), col)
                .assign(&w.index_axis(ndarray::Axis(1), i));
        }
        self.in_channels = keep.len();
        self.weight = Param::new(new_w.into_dyn());
        self.cache = None;
    }
}

/// Output columns j with in-bounds input column `j*stride + kj - padding`.
fn valid_j_range(kj: usize, stride: usize, padding: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = if kj >= padding {
        0
    } else {
        (padding - kj).div_ceil(stride)
    };
    // Largest j with j*stride + kj - padding <= w - 1.
    let hi_num = w + padding;
    if hi_num <= kj {
        return (1, 0);
    }
    let hi = ((hi_num - 1 - kj) / stride).min(ow.saturating_sub(1));
    (lo, hi)
}

fn im2col(
    x: &Array4<f64>,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut Array2<f64>,
) {
    let (b, cin, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (cin * k * k, b * oh * ow));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let ncols = b * oh * ow;
    for row in 0..cin * k * k {
        let ci = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let (j_lo, j_hi) = valid_j_range(kj, stride, padding, w, ow);
        let dst_row = &mut cs[row * ncols..][..ncols];
        for n in 0..b {
            let x_plane = &xs[(n * cin + ci) * h * w..][..h * w];
            for i in 0..oh {
                let ih = (i * stride + ki) as isize - padding as isize;
                let dst = &mut dst_row[n * oh * ow + i * ow..][..ow];
                if ih < 0 || ih >= h as isize || j_lo > j_hi {
                    dst.fill(0.0);
                    continue;
                }
                let src_row = &x_plane[ih as usize * w..][..w];
                dst[..j_lo].fill(0.0);
                dst[j_hi + 1..].fill(0.0);
                let base = j_lo * stride + kj - padding;
                if stride == 1 {
                    dst[j_lo..=j_hi].copy_from_slice(&src_row[base..base + (j_hi - j_lo + 1)]);
                } else {
                    let mut at = base;
                    for d in dst[j_lo..=j_hi].iter_mut() {
                        *d = src_row[at];
                        at += stride;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    d_cols: &Array2<f64>,
    b: usize,
    cin: usize,
    (h, w): (usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
) -> Array4<f64> {
    let mut dx = Array4::zeros((b, cin, h, w));
    let ds = d_cols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let ncols = b * oh * ow;
    for row in 0..cin * k * k {
        let ci = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let (j_lo, j_hi) = valid_j_range(kj, stride, padding, w, ow);
        if j_lo > j_hi {
            continue;
        }
        let src_row = &ds[row * ncols..][..ncols];
        for n in 0..b {
            let x_plane = &mut xs[(n * cin + ci) * h * w..][..h * w];
            for i in 0..oh {
                let ih = (i * stride + ki) as isize - padding as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let src = &src_row[n * oh * ow + i * ow..][..ow];
                let dst_row = &mut x_plane[ih as usize * w..][..w];
                let base = j_lo * stride + kj - padding;
                if stride == 1 {
                    for (d, s) in dst_row[base..base + (j_hi - j_lo + 1)]
                        .iter_mut()
                        .zip(&src[j_lo..=j_hi])
                    {
                        *d += *s;
                    }
                } else {
                    let mut at = base;
                    for s in &src[j_lo..=j_hi] {
                        dst_row[at] += *s;
                        at += stride;
                    }
                }
            }
        }
    }
    dx
}
