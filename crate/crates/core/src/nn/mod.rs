//! Minimal layers with hand-written backward passes.
//!
//! Layers keep `&self` forwards for inference (no caches, no mutation) and explicit
//! cache values for training, so inference is reentrant over shared parameters.

mod adam;
mod conv;
mod dense;
mod norm;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

pub use adam::Adam;
pub use conv::{max_pool2, max_pool2_backward, Conv2d, PoolCache};
pub use dense::{
    dropout, leaky_relu, leaky_relu_backward, log_softmax_rows, mfm, mfm_backward,
    nll_grad_from_log_probs, nll_loss, Linear, MfmCache,
};
pub use norm::{BatchNorm, BnCache};

/// Train mode uses batch statistics and stochastic dropout; eval mode is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            rng.random_range(-bound..=bound)
        }))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Uniform access to learnable parameters (for optimizers and gradient checks) and to
/// the full persistent state (parameters plus running statistics, for checkpoints).
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        self.visit_params(prefix, &mut |name, p| f(name, &mut p.value));
    }

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, p| p.zero_grad());
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
