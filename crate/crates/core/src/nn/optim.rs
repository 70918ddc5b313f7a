use ndarray::ArrayD;

use super::param::Param;

/// Adam with bias correction; state vectors are created lazily on the first
/// step and stay aligned with the parameter order they were first given.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to a different parameter set");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "optimizer bound to a different parameter set");
        for (i, p) in params.iter_mut().enumerate() {
            let vel = &mut self.velocity[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(vel)
                .for_each(|w, &g, v| {
                    *v = self.momentum * *v + g;
                    *w -= self.lr * *v;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_descends_quadratic() {
        // min (w - 3)^2, grad = 2(w - 3)
        let mut p = Param::new(arr1(&[0.0]).into_dyn());
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            p.zero_grad();
            let w = p.value[[0]];
            p.grad[[0]] = 2.0 * (w - 3.0);
            opt.step(&mut [&mut p]);
        }
        assert!((p.value[[0]] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn sgd_momentum_descends() {
        let mut p = Param::new(arr1(&[5.0]).into_dyn());
        let mut opt = Sgd::new(0.05, 0.9);
        for _ in 0..500 {
            p.zero_grad();
            let w = p.value[[0]];
            p.grad[[0]] = 2.0 * w;
            opt.step(&mut [&mut p]);
        }
        assert!(p.value[[0]].abs() < 1e-2);
    }
}
