use ndarray::{Array, Dimension};

use super::Mode;
use crate::scalar::Scalar;

/// Rectified linear unit over arrays of any rank.
#[derive(Debug, Clone, Default)]
pub struct Relu<D: Dimension> {
    active: Option<Array<bool, D>>,
}

impl<D: Dimension> Relu<D> {
    pub fn new() -> Self {
        Relu { active: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array<T, D>, mode: Mode) -> Array<T, D> {
        if mode == Mode::Train {
            self.active = Some(x.mapv(|v| v > T::zero()));
        }
        x.mapv(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array<T, D>) -> Array<T, D> {
        let active = self.active.take().expect("relu backward without a training forward");
        let mut dx = dy.clone();
        dx.zip_mut_with(&active, |d, &a| {
            if !a {
                *d = T::zero();
            }
        });
        dx
    }
}
