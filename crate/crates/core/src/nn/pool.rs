use ndarray::{Array2, Array4};

use crate::{Error, Result};

/// 2x2 max pooling with stride 2; spatial dims must be even.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    argmax: Option<Vec<usize>>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        MaxPool2x2::default()
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2x2", "even spatial dims", format!("{h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::zeros((b, c, oh, ow));
        let mut arg = vec![0usize; b * c * oh * ow];
        {
            let ys = y.as_slice_mut().expect("standard layout");
            for nc in 0..b * c {
                let plane = &xs[nc * h * w..][..h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let at = (2 * i + di) * w + 2 * j + dj;
                                if plane[at] > best {
                                    best = plane[at];
                                    best_at = at;
                                }
                            }
                        }
                        let out_at = nc * oh * ow + i * ow + j;
                        ys[out_at] = best;
                        arg[out_at] = nc * h * w + best_at;
                    }
                }
            }
        }
        self.argmax = Some(arg);
        self.input_dim = (b, c, h, w);
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let arg = self.argmax.as_ref().expect("maxpool backward before forward");
        let mut gx = Array4::zeros(self.input_dim);
        let gxs = gx.as_slice_mut().expect("standard layout");
        for (g, &at) in gy.iter().zip(arg.iter()) {
            gxs[at] += *g;
        }
        gx
    }
}

/// Global average pool NCHW -> (batch, channels).
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let mut y = Array2::zeros((b, c));
    let xs = x.as_slice().expect("standard layout");
    let plane = h * w;
    for n in 0..b {
        for ci in 0..c {
            y[[n, ci]] = xs[(n * c + ci) * plane..][..plane].iter().sum::<f64>() / plane as f64;
        }
    }
    y
}

/// Backward of [`global_avg_pool`]: spreads each per-channel gradient evenly.
pub fn global_avg_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (b, c) = gy.dim();
    let mut gx = Array4::zeros((b, c, h, w));
    let scale = 1.0 / (h * w) as f64;
    for n in 0..b {
        for ci in 0..c {
            gx.index_axis_mut(ndarray::Axis(0), n)
                .index_axis_mut(ndarray::Axis(0), ci)
                .fill(gy[[n, ci]] * scale);
        }
    }
    gx
}
