//! Objective terms for synthesis: target cross-entropy, the BN statistics
//! matching regularizer, and the total-variation / L2 image priors, each with
//! a hand-derived gradient. Components are reported unweighted; the weighted
//! sum is what the engine optimizes.

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::classifier::{BnRunningStats, ClassifierHandle, LayerBatchStats, TeacherSession};
use crate::{Error, Result};

/// Scale factors of the regularizer terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_bn: f64,
    pub lambda_tv: f64,
    pub lambda_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_bn: 10.0,
            lambda_tv: 6.0e-3,
            lambda_l2: 1.5e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_bn", self.lambda_bn),
            ("lambda_tv", self.lambda_tv),
            ("lambda_l2", self.lambda_l2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// All scalar terms of one forward pass.
///
/// Invariant: `total = ce + lambda_bn * r_bn + lambda_tv * r_tv +
/// lambda_l2 * r_l2` for the weights the loss was evaluated with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub r_bn: f64,
    pub r_tv: f64,
    pub r_l2: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ce.is_finite()
            && self.r_bn.is_finite()
            && self.r_tv.is_finite()
            && self.r_l2.is_finite()
    }
}

fn check_targets(targets: &[usize], batch: usize, classes: usize) -> Result<()> {
    if targets.len() != batch {
        return Err(Error::shape("targets", batch, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Config(format!(
            "target label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Batch-mean cross-entropy of softmax(logits) against target labels.
pub fn inception_loss(logits: &Array2<f64>, targets: &[usize]) -> Result<f64> {
    Ok(inception_loss_grad(logits, targets)?.0)
}

/// Cross-entropy plus its gradient w.r.t. the logits.
pub fn inception_loss_grad(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    check_targets(targets, b, c)?;
    let mut grad = Array2::zeros((b, c));
    let mut loss = 0.0;
    for (n, row) in logits.outer_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[targets[n]];
        for (j, g) in grad.row_mut(n).iter_mut().enumerate() {
            *g = (row[j] - lse).exp() / b as f64;
        }
        grad[[n, targets[n]]] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Layer-wise statistics matching: the sum over BN layers of the Euclidean
/// distances between captured batch statistics and stored running statistics.
pub fn bn_regularizer(stats: &LayerBatchStats, running: &BnRunningStats) -> Result<f64> {
    Ok(bn_regularizer_grad(stats, running)?.0)
}

/// Statistics matching loss plus per-layer gradients w.r.t. the captured
/// batch mean and variance.
#[allow(clippy::type_complexity)]
pub fn bn_regularizer_grad(
    stats: &LayerBatchStats,
    running: &BnRunningStats,
) -> Result<(f64, Vec<(Array1<f64>, Array1<f64>)>)> {
    if stats.num_layers() != running.num_layers() {
        return Err(Error::shape(
            "bn layer lists",
            running.num_layers(),
            stats.num_layers(),
        ));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(stats.num_layers());
    for i in 0..stats.num_layers() {
        if stats.means[i].len() != running.means[i].len() {
            return Err(Error::shape(
                "bn layer channels",
                running.means[i].len(),
                stats.means[i].len(),
            ));
        }
        let dm = &stats.means[i] - &running.means[i];
        let dv = &stats.vars[i] - &running.vars[i];
        let nm = dm.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nv = dv.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += nm + nv;
        // d||u||/du = u/||u||; zero distance contributes a zero subgradient.
        let gm = if nm > 0.0 { dm / nm } else { Array1::zeros(dm.len()) };
        let gv = if nv > 0.0 { dv / nv } else { Array1::zeros(dv.len()) };
        grads.push((gm, gv));
    }
    Ok((total, grads))
}

/// Anisotropic squared-difference total variation, summed per image over both
/// adjacency directions and all channels, then averaged over the batch.
pub fn tv_loss(images: &Array4<f64>) -> f64 {
    tv_loss_grad(images).0
}

pub fn tv_loss_grad(images: &Array4<f64>) -> (f64, Array4<f64>) {
    let (b, c, h, w) = images.dim();
    let mut grad = Array4::zeros((b, c, h, w));
    if h < 2 && w < 2 {
        log::warn!("tv_loss on {h}x{w} images has no adjacent pixels; returning 0");
        return (0.0, grad);
    }
    let xs = images.as_slice().expect("standard layout");
    let gs = grad.as_slice_mut().expect("standard layout");
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for nc in 0..b * c {
        let base = nc * h * w;
        for i in 0..h {
            for j in 0..w {
                let at = base + i * w + j;
                if j + 1 < w {
                    let d = xs[at + 1] - xs[at];
                    total += d * d;
                    gs[at + 1] += 2.0 * d * inv_b;
                    gs[at] -= 2.0 * d * inv_b;
                }
                if i + 1 < h {
                    let d = xs[at + w] - xs[at];
                    total += d * d;
                    gs[at + w] += 2.0 * d * inv_b;
                    gs[at] -= 2.0 * d * inv_b;
                }
            }
        }
    }
    (total * inv_b, grad)
}

/// Mean over the batch of each image's Euclidean norm.
pub fn l2_prior(images: &Array4<f64>) -> f64 {
    l2_prior_grad(images).0
}

pub fn l2_prior_grad(images: &Array4<f64>) -> (f64, Array4<f64>) {
    let (b, c, h, w) = images.dim();
    let mut grad = Array4::zeros((b, c, h, w));
    let plane = c * h * w;
    let xs = images.as_slice().expect("standard layout");
    let gs = grad.as_slice_mut().expect("standard layout");
    let mut total = 0.0;
    for n in 0..b {
        let img = &xs[n * plane..][..plane];
        let norm = img.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += norm;
        if norm > 0.0 {
            let scale = 1.0 / (b as f64 * norm);
            for (g, &x) in gs[n * plane..][..plane].iter_mut().zip(img) {
                *g = x * scale;
            }
        }
    }
    (total / b as f64, grad)
}

/// Evaluates the full objective on final images with a single teacher pass.
pub fn total_inversion_loss(
    images: &Array4<f64>,
    targets: &[usize],
    teacher: &ClassifierHandle,
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut session = teacher.session();
    let out = session.forward(images)?;
    let ce = inception_loss(&out.logits, targets)?;
    let r_bn = bn_regularizer(&out.stats, session.running_stats())?;
    let r_tv = tv_loss(images);
    let r_l2 = l2_prior(images);
    Ok(LossReport {
        total: ce + weights.lambda_bn * r_bn + weights.lambda_tv * r_tv + weights.lambda_l2 * r_l2,
        ce,
        r_bn,
        r_tv,
        r_l2,
    })
}

/// Full objective plus its gradient w.r.t. the input images, reusing one
/// session forward for the cross-entropy and statistics paths.
pub fn total_loss_with_input_grad(
    session: &mut TeacherSession,
    images: &Array4<f64>,
    targets: &[usize],
    weights: &LossWeights,
) -> Result<(LossReport, Array4<f64>)> {
    let out = session.forward(images)?;
    let (ce, d_logits) = inception_loss_grad(&out.logits, targets)?;
    let (r_bn, stat_grads) = bn_regularizer_grad(&out.stats, session.running_stats())?;
    let (r_tv, g_tv) = tv_loss_grad(images);
    let (r_l2, g_l2) = l2_prior_grad(images);

    let scaled: Vec<_> = stat_grads
        .into_iter()
        .map(|(m, v)| (m * weights.lambda_bn, v * weights.lambda_bn))
        .collect();
    let mut grad = session.backward(Some(&d_logits), None, Some(&scaled));
    grad.scaled_add(weights.lambda_tv, &g_tv);
    grad.scaled_add(weights.lambda_l2, &g_l2);

    let report = LossReport {
        total: ce + weights.lambda_bn * r_bn + weights.lambda_tv * r_tv + weights.lambda_l2 * r_l2,
        ce,
        r_bn,
        r_tv,
        r_l2,
    };
    Ok((report, grad))
}
