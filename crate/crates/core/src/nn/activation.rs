use ndarray::Array4;

/// Leaky rectifier; slope 0 gives plain ReLU.
#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f64,
    cache: Option<Array4<f64>>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, cache: None }
    }

    pub fn relu() -> Self {
        LeakyRelu::new(0.0)
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = x.mapv(|v| if v > 0.0 { v } else { self.slope * v });
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let x = self.cache.as_ref().expect("activation backward before forward");
        let mut gx = gy.clone();
        gx.zip_mut_with(x, |g, &v| {
            if v <= 0.0 {
                *g *= self.slope;
            }
        });
        gx
    }
}

/// Elementwise tanh; caches its output for backward.
#[derive(Debug, Clone, Default)]
pub struct Tanh {
    cache: Option<Array4<f64>>,
}

impl Tanh {
    pub fn new() -> Self {
        Tanh { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let y = x.mapv(f64::tanh);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, gy: &Array4<f64>) -> Array4<f64> {
        let y = self.cache.as_ref().expect("tanh backward before forward");
        let mut gx = gy.clone();
        gx.zip_mut_with(y, |g, &t| *g *= 1.0 - t * t);
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_error, numerical_grad, DEFAULT_EPS};
    use crate::nn::init::{seeded_rng, standard_normal};

    #[test]
    fn leaky_relu_gradient() {
        let x = standard_normal(&mut seeded_rng(21), &[1, 2, 3, 3]);
        let mut act = LeakyRelu::new(0.2);
        let x4: Array4<f64> = x.clone().into_dimensionality().unwrap();
        let y = act.forward(&x4);
        let gx = act.backward(&Array4::ones(y.raw_dim())).into_dyn();
        let num = numerical_grad(
            &x,
            |v| {
                LeakyRelu::new(0.2)
                    .forward(&v.clone().into_dimensionality().unwrap())
                    .sum()
            },
            DEFAULT_EPS,
        );
        assert!(max_rel_error(&gx, &num, 1e-8) < 1e-6);
    }

    #[test]
    fn tanh_gradient() {
        let x = standard_normal(&mut seeded_rng(22), &[1, 1, 4, 4]);
        let mut act = Tanh::new();
        let x4: Array4<f64> = x.clone().into_dimensionality().unwrap();
        let y = act.forward(&x4);
        let gx = act.backward(&Array4::ones(y.raw_dim())).into_dyn();
        let num = numerical_grad(
            &x,
            |v| Tanh::new().forward(&v.clone().into_dimensionality().unwrap()).sum(),
            DEFAULT_EPS,
        );
        assert!(max_rel_error(&gx, &num, 1e-8) < 1e-6);
    }
}
