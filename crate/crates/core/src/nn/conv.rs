use ndarray::{Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::{join, kaiming_normal, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 2-D convolution, square kernel, symmetric zero padding. Lowered to a
/// matrix product per sample via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    input: Option<Array4<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel > 0 && stride > 0, "kernel and stride must be positive");
        let fan_out = out_channels * kernel * kernel;
        let weight = Param::new(kaiming_normal(
            &[out_channels, in_channels, kernel, kernel],
            fan_out,
            rng,
        ));
        Conv2d {
            weight,
            bias: with_bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (ho, wo) = self.out_dims(h, w);
        Geometry {
            c: self.in_channels,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            ho,
            wo,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let k = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("conv weight is contiguous")
    }

    pub fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::Shape(format!(
                "input {h}x{w} smaller than kernel {}",
                self.kernel
            )));
        }
        let g = self.geometry(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let plane = c * h * w;
        let wm = self.weight_matrix();
        let bias = self.bias.as_ref().map(|b| b.value.as_slice().expect("contiguous"));

        let per_sample: Vec<Array2<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &xs[i * plane..(i + 1) * plane];
                let mut y = if g.is_pointwise() {
                    let view = ArrayView2::from_shape((c, h * w), xi).expect("shape");
                    wm.dot(&view)
                } else {
                    let col = im2col(xi, &g);
                    let view = ArrayView2::from_shape((c * g.k * g.k, g.ho * g.wo), &col).expect("shape");
                    wm.dot(&view)
                };
                if let Some(b) = bias {
                    for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b) {
                        row.mapv_inplace(|v| v + bv);
                    }
                }
                y
            })
            .collect();

        let mut out = Array4::zeros((n, self.out_channels, g.ho, g.wo));
        for (mut dst, y) in out.axis_iter_mut(Axis(0)).zip(per_sample) {
            dst.assign(&y.into_shape_with_order((self.out_channels, g.ho, g.wo)).expect("shape"));
        }
        self.input = (mode == Mode::Train).then(|| x.into_owned());
        Ok(out)
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let x = self.input.take().expect("conv backward without a training forward");
        let (n, c, h, w) = x.dim();
        let g = self.geometry(h, w);
        let xs = x.as_slice().expect("standard layout");
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let plane = c * h * w;
        let out_plane = self.out_channels * g.ho * g.wo;
        let kdim = c * g.k * g.k;
        let co = self.out_channels;
        let wm = self.weight_matrix();

        let per_sample: Vec<(Array2<T>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = &xs[i * plane..(i + 1) * plane];
                let dyi = ArrayView2::from_shape((co, g.ho * g.wo), &dys[i * out_plane..(i + 1) * out_plane])
                    .expect("shape");
                if g.is_pointwise() {
                    let xv = ArrayView2::from_shape((c, h * w), xi).expect("shape");
                    let dw = dyi.dot(&xv.t());
                    let dx = need_input_grad.then(|| wm.t().dot(&dyi).into_raw_vec_and_offset().0);
                    (dw, dx)
                } else {
                    let col = im2col(xi, &g);
                    let colv = ArrayView2::from_shape((kdim, g.ho * g.wo), &col).expect("shape");
                    let dw = dyi.dot(&colv.t());
                    let dx = need_input_grad.then(|| {
                        let dcol = wm.t().dot(&dyi);
                        col2im(dcol.as_slice().expect("contiguous"), &g)
                    });
                    (dw, dx)
                }
            })
            .collect();

        let mut dw_total = Array2::<T>::zeros((co, kdim));
        let mut dx_total = need_input_grad.then(|| Array4::<T>::zeros((n, c, h, w)));
        for (i, (dw, dx)) in per_sample.into_iter().enumerate() {
            dw_total += &dw;
            if let (Some(total), Some(dx)) = (dx_total.as_mut(), dx) {
                let view = ndarray::ArrayView3::from_shape((c, h, w), &dx).expect("shape");
                total.index_axis_mut(Axis(0), i).assign(&view);
            }
        }
        let dw_total = dw_total
            .into_shape_with_order((co, c, g.k, g.k))
            .expect("shape")
            .into_dyn();
        self.weight.grad += &dw_total;
        if let Some(b) = self.bias.as_mut() {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            b.grad += &db.into_dyn();
        }
        dx_total
    }

    #[cfg(test)]
    pub(crate) fn has_cache(&self) -> bool {
        self.input.is_some()
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let p_out = g.ho * g.wo;
    let mut col = vec![T::zero(); g.c * g.k * g.k * p_out];
    for ci in 0..g.c {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut col[row * p_out..(row + 1) * p_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.s + ki) as isize - g.p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src_row = &src[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.s + kj) as isize - g.p as isize;
                        if jj >= 0 && jj < g.w as isize {
                            *d = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry) -> Vec<T> {
    let p_out = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c * g.h * g.w];
    for ci in 0..g.c {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &col[row * p_out..(row + 1) * p_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.s + ki) as isize - g.p as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let srow = &src[oi * g.wo..(oi + 1) * g.wo];
                    for (oj, &v) in srow.iter().enumerate() {
                        let jj = (oj * g.s + kj) as isize - g.p as isize;
                        if jj >= 0 && jj < g.w as isize {
                            drow[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Reference convolution by direct summation, for tests.
#[cfg(test)]
pub(crate) fn conv_direct<T: Scalar>(conv: &Conv2d<T>, x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = conv.out_dims(h, w);
    let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let mut out = Array4::zeros((n, conv.out_channels, ho, wo));
    for b in 0..n {
        for o in 0..conv.out_channels {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = conv.bias.as_ref().map_or(T::zero(), |bb| bb.value[[o]]);
                    for ci in 0..c {
                        for ki in 0..conv.kernel {
                            for kj in 0..conv.kernel {
                                let ii = (oi * conv.stride + ki) as isize - conv.padding as isize;
                                let jj = (oj * conv.stride + kj) as isize - conv.padding as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += wt[[o, ci, ki, kj]] * x[[b, ci, ii as usize, jj as usize]];
                                }
                            }
                        }
                    }
                    out[[b, o, oi, oj]] = acc;
                }
            }
        }
    }
    out
}
