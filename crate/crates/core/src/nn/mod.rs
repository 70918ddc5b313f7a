//! Minimal differentiable layers over f64 NCHW tensors.
//!
//! Layers cache what their backward pass needs during forward, so the usage
//! contract is strict forward-then-backward per pass; networks that need two
//! concurrent passes (e.g. a frozen classifier used twice per step) clone the
//! layer stack per pass.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod optim;
pub mod param;
pub mod pool;
pub mod upsample;

pub use activation::{LeakyRelu, Tanh};
pub use batchnorm::{BatchNorm2d, BnMode};
pub use conv::Conv2d;
pub use linear::Linear;
pub use optim::{Adam, Sgd};
pub use param::{zero_grads, Param};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2x2};
pub use upsample::{upsample_nearest_2x, upsample_nearest_2x_backward};
