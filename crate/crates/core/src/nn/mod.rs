//! Minimal layer library with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a
//! [`Mode::Train`] forward and accumulates parameter gradients into
//! [`Param::grad`]. Activations are `N x C x H x W` arrays in standard layout.
//! Per-sample work is spread over the rayon pool; reductions across the
//! batch always run in sample order, so results do not depend on the number
//! of worker threads.

mod activation;
mod conv;
mod linear;
mod norm;
pub mod optim;
mod pool;

pub use activation::Relu;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward, AdaptiveAvgPool2d, MaxPool2d};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    /// Buffers such as batch-norm running statistics are stored as
    /// non-trainable params so they travel with checkpoints.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Param {
            value,
            grad: ArrayD::zeros(IxDyn(&[0])),
            trainable: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        if self.trainable {
            self.grad.fill(T::zero());
        }
    }
}

/// Hierarchically named parameter access, used by optimizers and checkpoints.
pub trait Parameterized<T: Scalar> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.len())
            .sum()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-normal initialization with `std = sqrt(2 / fan)`.
pub(crate) fn kaiming_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(normal.sample(rng)))
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(rng)))
}
