use ndarray::Array4;

use super::Mode;
use crate::scalar::Scalar;

/// 3x3 max pooling, stride 2, padding 1 (the residual-network stem).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    argmax: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    const K: usize = 3;
    const S: usize = 2;
    const P: usize = 1;

    pub fn new() -> Self {
        MaxPool2d { argmax: None }
    }

    pub fn out_dims(h: usize, w: usize) -> (usize, usize) {
        let span = |n: usize| (n + 2 * Self::P - Self::K) / Self::S + 1;
        (span(h), span(w))
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = Self::out_dims(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, ho, wo));
        let mut idx = vec![0usize; n * c * ho * wo];
        let os = out.as_slice_mut().expect("fresh array");
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_i = base;
                    for ki in 0..Self::K {
                        let ii = (oi * Self::S + ki) as isize - Self::P as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..Self::K {
                            let jj = (oj * Self::S + kj) as isize - Self::P as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let flat = base + ii as usize * w + jj as usize;
                            if xs[flat] > best {
                                best = xs[flat];
                                best_i = flat;
                            }
                        }
                    }
                    let o = (plane * ho + oi) * wo + oj;
                    os[o] = best;
                    idx[o] = best_i;
                }
            }
        }
        if mode == Mode::Train {
            self.argmax = Some((idx, (n, c, h, w)));
        }
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (idx, dims) = self.argmax.take().expect("max pool backward without a training forward");
        let mut dx = Array4::<T>::zeros(dims);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let dy = dy.as_standard_layout();
        for (&g, &i) in dy.as_slice().expect("standard layout").iter().zip(&idx) {
            dxs[i] += g;
        }
        dx
    }
}

fn bins(n_in: usize, n_out: usize) -> Vec<(usize, usize)> {
    (0..n_out)
        .map(|o| {
            let start = o * n_in / n_out;
            let end = ((o + 1) * n_in).div_ceil(n_out);
            (start, end.max(start + 1))
        })
        .collect()
}

/// Adaptive average pooling to a fixed output grid; bins follow the
/// `floor(i * in / out) .. ceil((i + 1) * in / out)` convention, so output
/// sizes larger than the input are allowed.
pub fn adaptive_avg_pool<T: Scalar>(x: &Array4<T>, out_h: usize, out_w: usize) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let rows = bins(h, out_h);
    let cols = bins(w, out_w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array4::<T>::zeros((n, c, out_h, out_w));
    let os = out.as_slice_mut().expect("fresh array");
    for plane in 0..n * c {
        let base = plane * h * w;
        for (oi, &(r0, r1)) in rows.iter().enumerate() {
            for (oj, &(c0, c1)) in cols.iter().enumerate() {
                let mut acc = T::zero();
                for r in r0..r1 {
                    acc += xs[base + r * w + c0..base + r * w + c1].iter().copied().sum::<T>();
                }
                os[(plane * out_h + oi) * out_w + oj] = acc / T::from_usize_lossy((r1 - r0) * (c1 - c0));
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(dy: &Array4<T>, in_h: usize, in_w: usize) -> Array4<T> {
    let (n, c, out_h, out_w) = dy.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.clone();
    }
    let rows = bins(in_h, out_h);
    let cols = bins(in_w, out_w);
    let dy = dy.as_standard_layout();
    let ds = dy.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((n, c, in_h, in_w));
    let dxs = dx.as_slice_mut().expect("fresh array");
    for plane in 0..n * c {
        let base = plane * in_h * in_w;
        for (oi, &(r0, r1)) in rows.iter().enumerate() {
            for (oj, &(c0, c1)) in cols.iter().enumerate() {
                let g = ds[(plane * out_h + oi) * out_w + oj] / T::from_usize_lossy((r1 - r0) * (c1 - c0));
                for r in r0..r1 {
                    for v in &mut dxs[base + r * in_w + c0..base + r * in_w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Stateful wrapper remembering the input size for backward.
#[derive(Debug, Clone, Default)]
pub struct AdaptiveAvgPool2d {
    input_hw: Option<(usize, usize)>,
}

impl AdaptiveAvgPool2d {
    pub fn new() -> Self {
        AdaptiveAvgPool2d { input_hw: None }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, out_h: usize, out_w: usize, mode: Mode) -> Array4<T> {
        let (_, _, h, w) = x.dim();
        if mode == Mode::Train {
            self.input_hw = Some((h, w));
        }
        adaptive_avg_pool(x, out_h, out_w)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (h, w) = self.input_hw.take().expect("pool backward without a training forward");
        adaptive_avg_pool_backward(dy, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut pool = MaxPool2d::new();
        let y = pool.forward(&x, Mode::Train);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dx = pool.backward(&Array4::<f64>::ones((1, 1, 2, 2)));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 1, 1]], 1.0);
    }

    #[test]
    fn adaptive_pool_integer_factor_is_block_mean() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let y = adaptive_avg_pool(&x, 2, 2);
        assert_eq!(y[[0, 0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let up = adaptive_avg_pool(&x, 8, 8);
        assert_eq!(up[[0, 0, 7, 7]], 15.0);
    }

    #[test]
    fn adaptive_pool_backward_is_adjoint() {
        // <pool(x), y> == <x, pool^T(y)> for arbitrary x, y.
        for &(h, oh) in &[(6usize, 4usize), (3, 7), (8, 2)] {
            let x = Array4::from_shape_fn((1, 2, h, h), |(_, c, i, j)| ((c + 1) * (i * 3 + j)) as f64 * 0.1);
            let y = Array4::from_shape_fn((1, 2, oh, oh), |(_, c, i, j)| (c as f64 - 0.5) * (i + 2 * j) as f64);
            let lhs = (adaptive_avg_pool(&x, oh, oh) * &y).sum();
            let rhs = (x * adaptive_avg_pool_backward(&y, h, h)).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
