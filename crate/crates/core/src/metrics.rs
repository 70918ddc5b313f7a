//! Generative-quality metrics over embedded image sets: Frechet distance
//! under arbitrary embedding classifiers, Inception Score, and kNN-manifold
//! Precision & Recall.

use ndarray::{Array1, Array2, Array4, Axis};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierHandle;
use crate::data::Provenance;
use crate::nn::global_avg_pool;
use crate::{Error, Result};

/// Which activations [`embed`] extracts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmbedLayer {
    /// Pooled features feeding the classifier head.
    Penultimate,
    /// A named tap, pooled per channel.
    Tap(String),
}

impl EmbedLayer {
    /// Parses "penultimate" or a tap name.
    pub fn parse(s: &str) -> EmbedLayer {
        if s == "penultimate" {
            EmbedLayer::Penultimate
        } else {
            EmbedLayer::Tap(s.to_string())
        }
    }
}

/// An n x d feature matrix with its provenance and embedder identity.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub features: Array2<f64>,
    pub source: Provenance,
    pub embedder: String,
}

impl EmbeddingSet {
    pub fn count(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Covariance-based metrics need n >= d + 1; smaller sets are flagged.
    pub fn is_degenerate(&self) -> bool {
        self.count() < self.dim() + 1
    }
}

/// Metric values for one (real, synthesized) pair under one embedder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fd: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub precision: f64,
    pub recall: f64,
    pub real_count: usize,
    pub fake_count: usize,
    pub embedder: String,
    /// Either set had fewer than d+1 samples.
    pub degenerate: bool,
    /// The covariance square root needed diagonal regularization.
    pub fd_regularized: bool,
}

/// Embeds images with a frozen classifier; deterministic and batch-order
/// preserving. Tap features are pooled per channel.
pub fn embed(
    embedder: &ClassifierHandle,
    images: &Array4<f64>,
    layer: &EmbedLayer,
    source: Provenance,
) -> Result<EmbeddingSet> {
    let tap_index = match layer {
        EmbedLayer::Penultimate => embedder.tap_names.len() - 1,
        EmbedLayer::Tap(name) => embedder
            .tap_names
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown embedding layer {name:?}; expected \"penultimate\" or one of {:?}",
                    embedder.tap_names
                ))
            })?,
    };
    let (_, pyramid, _) = embedder.forward_with_taps(images)?;
    let features = global_avg_pool(&pyramid.maps[tap_index]);
    Ok(EmbeddingSet {
        features,
        source,
        embedder: embedder.digest(),
    })
}

/// Softmax class probabilities of an embedder over images (for the score
/// based on label entropy).
pub fn class_probs(embedder: &ClassifierHandle, images: &Array4<f64>) -> Result<Array2<f64>> {
    let (logits, _, _) = embedder.forward_with_taps(images)?;
    let mut probs = logits;
    for mut row in probs.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(probs)
}

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).expect("non-empty set");
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = DMatrix::zeros(d, d);
    for row in x.outer_iter() {
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (c, s) in sqrt_vals.iter().enumerate() {
        scaled.column_mut(c).scale_mut(*s);
    }
    scaled * v.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(a);
    let m = &ra * b * &ra;
    let sym = (&m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum()
}

/// Frechet distance between the Gaussians fitted to two embedding sets.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    Ok(frechet_distance_detailed(a, b)?.0)
}

/// Frechet distance plus whether diagonal regularization was applied.
pub fn frechet_distance_detailed(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<(f64, bool)> {
    if a.dim() != b.dim() {
        return Err(Error::shape("embedding dims", a.dim(), b.dim()));
    }
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::Config("empty embedding set".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(&a.features);
    let (mu_b, cov_b) = mean_and_cov(&b.features);
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let fd = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(&cov_a, &cov_b);
    if fd.is_finite() {
        return Ok((fd.max(0.0), false));
    }
    // Degenerate covariances: retry with a small diagonal ridge.
    let d = a.dim();
    let ridge = DMatrix::identity(d, d) * 1e-6;
    let ca = &cov_a + &ridge;
    let cb = &cov_b + &ridge;
    let fd = mean_term + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
    if !fd.is_finite() {
        return Err(Error::Numerical("Frechet distance non-finite after regularization".into()));
    }
    Ok((fd.max(0.0), true))
}

/// Split-wise exponential of the mean KL between per-sample class
/// distributions and their split marginal; rows must sum to 1 within 1e-5.
pub fn inception_score(probs: &Array2<f64>, splits: usize) -> Result<(f64, f64)> {
    let (n, c) = probs.dim();
    if n == 0 || c == 0 {
        return Err(Error::Config("empty probability matrix".into()));
    }
    if splits == 0 || splits > n {
        return Err(Error::Config(format!("splits must be in 1..={n}, got {splits}")));
    }
    for (i, row) in probs.outer_iter().enumerate() {
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Config(format!("probability row {i} sums to {s}")));
        }
        if row.iter().any(|&p| p < 0.0) {
            return Err(Error::Config(format!("probability row {i} has negative entries")));
        }
    }
    let mut scores = Vec::with_capacity(splits);
    let chunk = n.div_ceil(splits);
    for s in 0..splits {
        let lo = s * chunk;
        let hi = ((s + 1) * chunk).min(n);
        if lo >= hi {
            continue;
        }
        let part = probs.slice(ndarray::s![lo..hi, ..]);
        let marginal = part.mean_axis(Axis(0)).expect("non-empty split");
        let mut kl_sum = 0.0;
        for row in part.outer_iter() {
            for (p, q) in row.iter().zip(marginal.iter()) {
                if *p > 0.0 {
                    kl_sum += p * (p.ln() - q.ln());
                }
            }
        }
        scores.push((kl_sum / (hi - lo) as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

fn pairwise_sq(points: &Array2<f64>, others: &Array2<f64>) -> Array2<f64> {
    let (n, d) = points.dim();
    let m = others.nrows();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..d {
                let diff = points[[i, k]] - others[[j, k]];
                acc += diff * diff;
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// kth-neighbor squared radius per point within one set, excluding the
/// self-distance.
fn knn_radii_sq(points: &Array2<f64>, k: usize) -> Vec<f64> {
    let dists = pairwise_sq(points, points);
    let n = points.nrows();
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dists[[i, j]]).collect();
            row.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            row[k - 1]
        })
        .collect()
}

/// kNN-manifold precision (synthesized points on the real manifold) and
/// recall (real points on the synthesized manifold).
pub fn precision_recall(real: &EmbeddingSet, fake: &EmbeddingSet, k: usize) -> Result<(f64, f64)> {
    if real.dim() != fake.dim() {
        return Err(Error::shape("embedding dims", real.dim(), fake.dim()));
    }
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if real.count() < k + 1 || fake.count() < k + 1 {
        return Err(Error::Config(format!(
            "need at least k+1={} points per set, got {} real / {} fake",
            k + 1,
            real.count(),
            fake.count()
        )));
    }
    let covered = |manifold: &Array2<f64>, probes: &Array2<f64>| -> f64 {
        let radii = knn_radii_sq(manifold, k);
        let dists = pairwise_sq(probes, manifold);
        let n = probes.nrows();
        let mut inside = 0usize;
        for i in 0..n {
            if (0..manifold.nrows()).any(|j| dists[[i, j]] <= radii[j]) {
                inside += 1;
            }
        }
        inside as f64 / n as f64
    };
    let precision = covered(&real.features, &fake.features);
    let recall = covered(&fake.features, &real.features);
    Ok((precision, recall))
}

/// Scores a synthesized set against a real set under one embedder.
pub fn evaluate_sets(
    embedder: &ClassifierHandle,
    real_images: &Array4<f64>,
    fake_images: &Array4<f64>,
    k: usize,
    splits: usize,
) -> Result<MetricReport> {
    let real = embed(embedder, real_images, &EmbedLayer::Penultimate, Provenance::Real)?;
    let fake = embed(
        embedder,
        fake_images,
        &EmbedLayer::Penultimate,
        Provenance::Synthesized,
    )?;
    let (fd, fd_regularized) = frechet_distance_detailed(&real, &fake)?;
    let probs = class_probs(embedder, fake_images)?;
    let (is_mean, is_std) = inception_score(&probs, splits)?;
    let (precision, recall) = precision_recall(&real, &fake, k)?;
    Ok(MetricReport {
        fd,
        is_mean,
        is_std,
        precision,
        recall,
        real_count: real.count(),
        fake_count: fake.count(),
        embedder: real.embedder.clone(),
        degenerate: real.is_degenerate() || fake.is_degenerate(),
        fd_regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{seeded_rng, standard_normal};

    fn set(features: Array2<f64>) -> EmbeddingSet {
        EmbeddingSet {
            features,
            source: Provenance::Real,
            embedder: "test".into(),
        }
    }

    fn gaussian_set(seed: u64, n: usize, d: usize, shift: f64) -> EmbeddingSet {
        let mut f: Array2<f64> = standard_normal(&mut seeded_rng(seed), &[n, d])
            .into_dimensionality()
            .unwrap();
        f.mapv_inplace(|v| v + shift);
        set(f)
    }

    #[test]
    fn fd_identical_sets_is_zero() {
        let a = gaussian_set(1, 200, 4, 0.0);
        let fd = frechet_distance(&a, &a).unwrap();
        assert!(fd.abs() < 1e-6, "fd {fd}");
    }

    #[test]
    fn fd_exact_moments_oracle() {
        // Sample moments pinned exactly: mean 0 var 1 vs mean 1 var 1 in 1-D
        // gives (0-1)^2 + (1 + 1 - 2) = 1.
        let s = 0.5_f64.sqrt();
        let a = set(ndarray::arr2(&[[-s], [s]]));
        let b = set(ndarray::arr2(&[[1.0 - s], [1.0 + s]]));
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 1.0).abs() < 1e-9, "fd {fd}");
    }

    #[test]
    fn fd_is_symmetric() {
        let a = gaussian_set(2, 150, 3, 0.0);
        let b = gaussian_set(3, 150, 3, 0.7);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn fd_grows_with_shift() {
        let a = gaussian_set(4, 400, 2, 0.0);
        let mut last = -1.0;
        for shift in [0.0, 0.5, 1.0, 2.0] {
            let b = gaussian_set(5, 400, 2, shift);
            let fd = frechet_distance(&a, &b).unwrap();
            assert!(fd > last, "fd {fd} after {last} at shift {shift}");
            last = fd;
        }
    }

    #[test]
    fn is_uniform_rows_score_one() {
        let probs = Array2::from_elem((50, 10), 0.1);
        let (m, s) = inception_score(&probs, 1).unwrap();
        assert!((m - 1.0).abs() < 1e-9);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn is_one_hot_uniform_coverage_scores_c() {
        let mut probs = Array2::zeros((50, 10));
        for i in 0..50 {
            probs[[i, i % 10]] = 1.0;
        }
        let (m, _) = inception_score(&probs, 1).unwrap();
        assert!((m - 10.0).abs() < 1e-9, "IS {m}");
    }

    #[test]
    fn is_single_class_scores_one() {
        let mut probs = Array2::zeros((30, 10));
        for i in 0..30 {
            probs[[i, 3]] = 1.0;
        }
        let (m, _) = inception_score(&probs, 1).unwrap();
        assert!((m - 1.0).abs() < 1e-9);
    }

    #[test]
    fn is_rejects_unnormalized_rows() {
        let probs = Array2::from_elem((5, 4), 0.3);
        assert!(inception_score(&probs, 1).is_err());
    }

    #[test]
    fn pr_identical_sets() {
        let a = gaussian_set(7, 60, 3, 0.0);
        let (p, r) = precision_recall(&a, &a, 3).unwrap();
        assert_eq!((p, r), (1.0, 1.0));
    }

    #[test]
    fn pr_disjoint_clusters() {
        let a = gaussian_set(8, 80, 2, 0.0);
        let b = gaussian_set(9, 80, 2, 1000.0);
        let (p, r) = precision_recall(&a, &b, 3).unwrap();
        assert_eq!((p, r), (0.0, 0.0));
    }

    #[test]
    fn pr_half_coverage() {
        // Real has two distant modes; fake covers only one.
        let m1 = gaussian_set(10, 50, 2, 0.0).features;
        let m2 = gaussian_set(11, 50, 2, 500.0).features;
        let mut real = Array2::zeros((100, 2));
        real.slice_mut(ndarray::s![..50, ..]).assign(&m1);
        real.slice_mut(ndarray::s![50.., ..]).assign(&m2);
        let fake = gaussian_set(12, 60, 2, 0.0);
        let (p, r) = precision_recall(&set(real), &fake, 3).unwrap();
        assert!(p > 0.9, "precision {p}");
        assert!((r - 0.5).abs() < 0.1, "recall {r}");
    }

    #[test]
    fn pr_needs_enough_points() {
        let a = gaussian_set(13, 3, 2, 0.0);
        let b = gaussian_set(14, 10, 2, 0.0);
        assert!(precision_recall(&a, &b, 3).is_err());
    }
}
