use ndarray::{Array1, Array4};

use super::param::Param;
use crate::{Error, Result};

/// Whether normalization uses the current batch statistics or the stored
/// running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization over NCHW tensors.
///
/// Every forward pass records the per-channel mean and biased variance of its
/// input over (batch, height, width), regardless of mode. Frozen classifiers
/// run in `Eval` and expose those captured statistics for distribution
/// matching against their running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub mode: BnMode,
    /// Per-channel mean of the last forward input.
    pub batch_mean: Array1<f64>,
    /// Per-channel biased variance of the last forward input.
    pub batch_var: Array1<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x: Array4<f64>,
    xhat: Array4<f64>,
    std: Array1<f64>,
    mode: BnMode,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ndarray::ArrayD::ones(ndarray::IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
            eps: 1e-5,
            momentum: 0.1,
            mode: BnMode::Train,
            batch_mean: Array1::zeros(channels),
            batch_var: Array1::ones(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (b, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::shape("batchnorm channels", self.channels, c));
        }
        let m = (b * h * w) as f64;
        let plane = h * w;
        let xs = x.as_slice().expect("standard layout");

        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let mut sum = 0.0;
            for n in 0..b {
                let p = &xs[(n * c + ci) * plane..][..plane];
                sum += p.iter().sum::<f64>();
            }
            let mu = sum / m;
            let mut sq = 0.0;
            for n in 0..b {
                let p = &xs[(n * c + ci) * plane..][..plane];
                sq += p.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }
        self.batch_mean = mean.clone();
        self.batch_var = var.clone();

        let (norm_mean, norm_var) = match self.mode {
            BnMode::Train => {
                // Running estimates track the biased batch variance so that
                // the stored statistics and the captured batch statistics
                // live on the same scale.
                self.running_mean = &self.running_mean * (1.0 - self.momentum) + &mean * self.momentum;
                self.running_var = &self.running_var * (1.0 - self.momentum) + &var * self.momentum;
                (mean, var)
            }
            BnMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let std = norm_var.mapv(|v| (v + self.eps).sqrt());

        let mut xhat = Array4::zeros((b, c, h, w));
        let mut y = Array4::zeros((b, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("standard layout");
            let ys = y.as_slice_mut().expect("standard layout");
            let gamma = self.gamma.value.as_slice().expect("gamma contiguous");
            let beta = self.beta.value.as_slice().expect("beta contiguous");
            for n in 0..b {
                for ci in 0..c {
                    let base = (n * c + ci) * plane;
                    let (mu, sd) = (norm_mean[ci], std[ci]);
                    let (g, be) = (gamma[ci], beta[ci]);
                    let src = &xs[base..][..plane];
                    let xh_dst = &mut xh[base..][..plane];
                    let y_dst = &mut ys[base..][..plane];
                    for ((x, xn), y) in src.iter().zip(xh_dst.iter_mut()).zip(y_dst.iter_mut()) {
                        let v = (x - mu) / sd;
                        *xn = v;
                        *y = g * v + be;
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            x: x.clone(),
            xhat,
            std,
            mode: self.mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array4<f64>, param_grads: bool) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("batchnorm backward before forward");
        let (b, c, h, w) = gy.dim();
        let plane = h * w;
        let m = (b * h * w) as f64;
        let gys = gy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");

        // Per-channel reductions shared by both modes.
        let mut sum_gy = vec![0.0; c];
        let mut sum_gy_xhat = vec![0.0; c];
        for n in 0..b {
            for ci in 0..c {
                let base = (n * c + ci) * plane;
                let mut s = 0.0;
                let mut sx = 0.0;
                for (g, x) in gys[base..][..plane].iter().zip(&xh[base..][..plane]) {
                    s += g;
                    sx += g * x;
                }
                sum_gy[ci] += s;
                sum_gy_xhat[ci] += sx;
            }
        }
        if param_grads {
            let gg = self.gamma.grad.as_slice_mut().expect("gamma grad");
            let bg = self.beta.grad.as_slice_mut().expect("beta grad");
            for ci in 0..c {
                gg[ci] += sum_gy_xhat[ci];
                bg[ci] += sum_gy[ci];
            }
        }

        let gamma = self.gamma.value.as_slice().expect("gamma contiguous");
        let mut gx = Array4::zeros((b, c, h, w));
        let gxs = gx.as_slice_mut().expect("standard layout");
        match cache.mode {
            BnMode::Train => {
                for n in 0..b {
                    for ci in 0..c {
                        let base = (n * c + ci) * plane;
                        let scale = gamma[ci] / cache.std[ci];
                        let mg = sum_gy[ci] / m;
                        let mgx = sum_gy_xhat[ci] / m;
                        let g_src = &gys[base..][..plane];
                        let x_src = &xh[base..][..plane];
                        for ((gx, g), x) in gxs[base..][..plane].iter_mut().zip(g_src).zip(x_src) {
                            *gx = scale * (g - mg - x * mgx);
                        }
                    }
                }
            }
            BnMode::Eval => {
                for n in 0..b {
                    for ci in 0..c {
                        let base = (n * c + ci) * plane;
                        let scale = gamma[ci] / cache.std[ci];
                        for (gx, g) in gxs[base..][..plane].iter_mut().zip(&gys[base..][..plane]) {
                            *gx = scale * g;
                        }
                    }
                }
            }
        }
        gx
    }

    /// Input-gradient contribution of a loss term that depends directly on
    /// the captured batch statistics: given dL/dμ and dL/dσ² per channel,
    /// returns dL/dx through those statistics alone.
    pub fn stat_input_grad(&self, d_mean: &Array1<f64>, d_var: &Array1<f64>) -> Array4<f64> {
        let cache = self.cache.as_ref().expect("stat grad before forward");
        let (b, c, h, w) = cache.x.dim();
        let plane = h * w;
        let m = (b * h * w) as f64;
        let xs = cache.x.as_slice().expect("standard layout");
        let mut g = Array4::zeros((b, c, h, w));
        let gs = g.as_slice_mut().expect("standard layout");
        for n in 0..b {
            for ci in 0..c {
                let base = (n * c + ci) * plane;
                let dm = d_mean[ci] / m;
                let dv = 2.0 * d_var[ci] / m;
                let mu = self.batch_mean[ci];
                for (g, x) in gs[base..][..plane].iter_mut().zip(&xs[base..][..plane]) {
                    *g = dm + dv * (x - mu);
                }
            }
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    /// Keeps only the listed channels (ascending, deduplicated).
    pub fn prune_channels(&mut self, keep: &[usize]) {
        let pick1 = |a: &Array1<f64>| Array1::from_iter(keep.iter().map(|&i| a[i]));
        let pick_param = |p: &Param| {
            Param::new(
                Array1::from_iter(keep.iter().map(|&i| p.value[[i]])).into_dyn(),
            )
        };
        self.gamma = pick_param(&self.gamma);
        self.beta = pick_param(&self.beta);
        self.running_mean = pick1(&self.running_mean);
        self.running_var = pick1(&self.running_var);
        self.batch_mean = pick1(&self.batch_mean);
        self.batch_var = pick1(&self.batch_var);
        self.channels = keep.len();
        self.cache = None;
    }
}
