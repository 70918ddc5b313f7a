use ndarray::{Array2, Axis};
use rand_chacha::ChaCha20Rng;

use super::init::scaled_normal;
use super::param::Param;
use crate::{Error, Result};

/// Fully connected layer over (batch, features) tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // (out, in)
    pub bias: Param,   // (out,)
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha20Rng) -> Self {
        Linear {
            weight: Param::new(scaled_normal(rng, &[out_features, in_features], in_features)),
            bias: Param::zeros(&[out_features]),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_features {
            return Err(Error::shape("linear input", self.in_features, x.ncols()));
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight 2-D");
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("linear bias 1-D");
        let y = x.dot(&w.t()) + &b;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array2<f64>, param_grads: bool) -> Array2<f64> {
        let x = self.cache.as_ref().expect("linear backward before forward");
        if param_grads {
            let dw = gy.t().dot(x);
            let mut wg = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("linear grad 2-D");
            wg += &dw;
            let db = gy.sum_axis(Axis(0));
            let mut bg = self
                .bias
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias grad 1-D");
            bg += &db;
        }
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight 2-D");
        gy.dot(&w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}
