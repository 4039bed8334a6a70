use ndarray::{Array1, Array4, ArrayD, IxDyn};

use super::{join, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    channels: usize,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            bias: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
            momentum: 0.1,
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let count = n * hw;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let eps = T::lit(self.eps);

        let (mean, var) = if mode == Mode::Train {
            let mut mean = Array1::<T>::zeros(c);
            let mut var = Array1::<T>::zeros(c);
            let inv_count = T::one() / T::from_usize_lossy(count);
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    let start = (b * c + ch) * hw;
                    acc += xs[start..start + hw].iter().copied().sum::<T>();
                }
                let m = acc * inv_count;
                let mut sq = T::zero();
                for b in 0..n {
                    let start = (b * c + ch) * hw;
                    sq += xs[start..start + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                mean[ch] = m;
                var[ch] = sq * inv_count;
            }
            let mom = T::lit(self.momentum);
            let unbias = if count > 1 {
                T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
            } else {
                T::one()
            };
            for ch in 0..c {
                let rm = &mut self.running_mean.value[[ch]];
                *rm = (T::one() - mom) * *rm + mom * mean[ch];
                let rv = &mut self.running_var.value[[ch]];
                *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (
                Array1::from_iter(self.running_mean.value.iter().copied()),
                Array1::from_iter(self.running_var.value.iter().copied()),
            )
        };

        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut out = Array4::<T>::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh array");
            let o = out.as_slice_mut().expect("fresh array");
            for b in 0..n {
                for ch in 0..c {
                    let start = (b * c + ch) * hw;
                    let (m, is, g, bt) = (
                        mean[ch],
                        inv_std[ch],
                        self.weight.value[[ch]],
                        self.bias.value[[ch]],
                    );
                    for i in start..start + hw {
                        let v = (xs[i] - m) * is;
                        xh[i] = v;
                        o[i] = g * v + bt;
                    }
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(Cache {
            xhat,
            inv_std,
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("batch norm backward without a training forward");
        let (n, c, h, w) = dy.dim();
        let hw = h * w;
        let count = T::from_usize_lossy(n * hw);
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let xh = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let start = (b * c + ch) * hw;
                for i in start..start + hw {
                    sum_dy += dys[i];
                    sum_dy_xhat += dys[i] * xh[i];
                }
            }
            self.weight.grad[[ch]] += sum_dy_xhat;
            self.bias.grad[[ch]] += sum_dy;
            let gamma = self.weight.value[[ch]];
            let is = cache.inv_std[ch];
            for b in 0..n {
                let start = (b * c + ch) * hw;
                for i in start..start + hw {
                    dxs[i] = gamma * is * (dys[i] - (sum_dy + xh[i] * sum_dy_xhat) / count);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }
}
