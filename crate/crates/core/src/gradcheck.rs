//! Central finite-difference gradient oracle.
//!
//! This module is the independent side of every gradient test in the crate:
//! it only re-evaluates a scalar closure at perturbed inputs and never looks
//! at analytic backward code.

use ndarray::{ArrayD, ArrayViewMutD};

/// Step size for central differences on unit-scale f64 inputs.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, perturbing one entry at a time.
pub fn numerical_grad<F>(x: &ArrayD<f64>, mut f: F, eps: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = ArrayD::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let orig = flat(&mut probe.view_mut(), idx);
        set_flat(&mut probe.view_mut(), idx, orig + eps);
        let fp = f(&probe);
        set_flat(&mut probe.view_mut(), idx, orig - eps);
        let fm = f(&probe);
        set_flat(&mut probe.view_mut(), idx, orig);
        set_flat(&mut grad.view_mut(), idx, (fp - fm) / (2.0 * eps));
    }
    grad
}

/// Like [`numerical_grad`] but only at the listed flat indices; returns
/// `(index, derivative)` pairs. Keeps checks on large parameter tensors cheap.
pub fn numerical_grad_at<F>(x: &ArrayD<f64>, indices: &[usize], mut f: F, eps: f64) -> Vec<(usize, f64)>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &idx in indices {
        let orig = flat(&mut probe.view_mut(), idx);
        set_flat(&mut probe.view_mut(), idx, orig + eps);
        let fp = f(&probe);
        set_flat(&mut probe.view_mut(), idx, orig - eps);
        let fm = f(&probe);
        set_flat(&mut probe.view_mut(), idx, orig);
        out.push((idx, (fp - fm) / (2.0 * eps)));
    }
    out
}

/// Maximum relative error between analytic and numeric gradients.
///
/// Per element: `|a - n| / max(|a|, |n|, atol_floor)`; the floor keeps
/// near-zero derivatives from blowing the ratio up on pure roundoff.
pub fn max_rel_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>, atol_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(atol_floor))
        .fold(0.0, f64::max)
}

fn flat(a: &mut ArrayViewMutD<'_, f64>, idx: usize) -> f64 {
    *a.as_slice_memory_order_mut().expect("contiguous")[idx..].first().unwrap()
}

fn set_flat(a: &mut ArrayViewMutD<'_, f64>, idx: usize, v: f64) {
    a.as_slice_memory_order_mut().expect("contiguous")[idx] = v;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_gradient() {
        let x = arr1(&[1.0, -2.0, 0.5]).into_dyn();
        let g = numerical_grad(&x, |v| v.iter().map(|&t| t * t).sum(), DEFAULT_EPS);
        let expect = arr1(&[2.0, -4.0, 1.0]).into_dyn();
        assert!(max_rel_error(&expect, &g, 1e-8) < 1e-6);
    }
}
