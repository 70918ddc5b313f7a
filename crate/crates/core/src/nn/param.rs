use ndarray::{ArrayD, ArrayViewD, IxDyn};

/// A trainable tensor with its accumulated gradient.
///
/// Layers own their parameters; optimizers receive them as a flat
/// `Vec<&mut Param>` in construction order, which is what makes parameter
/// ordering (and therefore checkpoints and seeded runs) reproducible.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn view(&self) -> ArrayViewD<'_, f64> {
        self.value.view()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Zeroes the gradients of every parameter in the slice.
pub fn zero_grads(params: &mut [&mut Param]) {
    for p in params.iter_mut() {
        p.zero_grad();
    }
}
