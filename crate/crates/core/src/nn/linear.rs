use ndarray::{Array2, Axis, Ix2};
use rand::Rng;

use super::{join, uniform, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        Linear {
            weight: Param::new(uniform(&[out_features, in_features], bound, rng)),
            bias: Param::new(uniform(&[out_features], bound, rng)),
            in_features,
            out_features,
            input: None,
        }
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&mut self, x: &Array2<T>, mode: Mode) -> Result<Array2<T>> {
        if x.ncols() != self.in_features {
            return Err(Error::Shape(format!(
                "linear expects {} features, got {}",
                self.in_features,
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.w().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &b;
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.input.take().expect("linear backward without a training forward");
        let dw = dy.t().dot(&x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &dy.sum_axis(Axis(0)).into_dyn();
        dy.dot(&self.w())
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_backward_shapes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(4, 2, &mut rng);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let y = lin.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dim(), (3, 2));
        let dy = Array2::ones((3, 2));
        let dx = lin.backward(&dy);
        assert_eq!(dx.dim(), (3, 4));
        assert_eq!(lin.bias.grad[[0]], 3.0);
        assert!((lin.weight.grad[[1, 2]] - x.column(2).sum()).abs() < 1e-12);
        assert!(lin.forward(&Array2::zeros((1, 5)), Mode::Eval).is_err());
    }
}
