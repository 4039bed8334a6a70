//! Training losses: a category loss whose per-class weights are recomputed
//! from every batch, and an L1 loss on valence/arousal/dominance.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_C: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Smoothing constant in `w_i = 1 / ln(p_i + c)`; must exceed 1.
    pub c: f64,
    pub lambda_cat: f64,
    pub lambda_cont: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            c: DEFAULT_C,
            lambda_cat: 1.0,
            lambda_cont: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_c(self.c)?;
        if self.lambda_cat < 0.0 || self.lambda_cont < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_c(c: f64) -> Result<()> {
    if c.is_nan() || c <= 1.0 {
        return Err(Error::Config(format!("loss.c must be > 1 so that ln(p + c) > 0, got {c}")));
    }
    Ok(())
}

/// Per-category weights for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights<T> {
    pub w: Array1<T>,
    /// Fraction of batch samples carrying each category.
    pub p: Array1<T>,
    pub c: T,
}

/// `p_i` = share of samples labelled with category `i`, `w_i = 1 / ln(p_i + c)`.
/// Labels are binary; a sample counts once per category.
pub fn batch_weights<T: Scalar>(labels: ArrayView2<T>, c: f64) -> Result<BatchWeights<T>> {
    check_c(c)?;
    let (batch, k) = labels.dim();
    if batch == 0 {
        return Err(Error::Shape("batch_weights needs at least one sample".into()));
    }
    let half = T::lit(0.5);
    let inv_b = T::one() / T::from_usize_lossy(batch);
    let cc = T::lit(c);
    let p = Array1::from_shape_fn(k, |i| {
        let count = labels.column(i).iter().filter(|&&y| y > half).count();
        T::from_usize_lossy(count) * inv_b
    });
    let w = p.mapv(|pi| T::one() / (pi + cc).ln());
    Ok(BatchWeights { w, p, c: cc })
}

/// `sum_i w_i (pred_i - target_i)^2` for one sample.
pub fn loss_cat<T: Scalar>(pred: ArrayView1<T>, target: ArrayView1<T>, weights: &BatchWeights<T>) -> Result<T> {
    if pred.len() != target.len() || pred.len() != weights.w.len() {
        return Err(Error::Shape(format!(
            "loss_cat lengths: pred {}, target {}, weights {}",
            pred.len(),
            target.len(),
            weights.w.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target.iter())
        .zip(weights.w.iter())
        .map(|((&a, &b), &w)| w * (a - b) * (a - b))
        .sum())
}

/// Mean absolute error over the continuous dimensions of one sample.
pub fn loss_cont<T: Scalar>(pred: ArrayView1<T>, target: ArrayView1<T>) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "loss_cont lengths: pred {}, target {}",
            pred.len(),
            target.len()
        )));
    }
    let sum: T = pred.iter().zip(target.iter()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(sum / T::from_usize_lossy(pred.len()))
}

pub fn loss_total<T: Scalar>(cat: T, cont: T, lambda_cat: T, lambda_cont: T) -> T {
    lambda_cat * cat + lambda_cont * cont
}

/// Batch mean of [`loss_cat`] and its gradient with respect to `pred`.
pub fn loss_cat_batch<T: Scalar>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    weights: &BatchWeights<T>,
) -> Result<(T, Array2<T>)> {
    if pred.dim() != target.dim() || pred.ncols() != weights.w.len() {
        return Err(Error::Shape(format!(
            "loss_cat_batch: pred {:?}, target {:?}, weights {}",
            pred.dim(),
            target.dim(),
            weights.w.len()
        )));
    }
    let n = T::from_usize_lossy(pred.nrows().max(1));
    let mut total = T::zero();
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        total += loss_cat(p, t, weights)?;
    }
    let two = T::lit(2.0);
    let grad = Array2::from_shape_fn(pred.dim(), |(r, i)| two * weights.w[i] * (pred[[r, i]] - target[[r, i]]) / n);
    Ok((total / n, grad))
}

/// Batch mean of [`loss_cont`] and its (sub)gradient with respect to `pred`.
/// At exactly zero difference the subgradient 0 is used.
pub fn loss_cont_batch<T: Scalar>(pred: ArrayView2<T>, target: ArrayView2<T>) -> Result<(T, Array2<T>)> {
    if pred.dim() != target.dim() || pred.ncols() == 0 {
        return Err(Error::Shape(format!(
            "loss_cont_batch: pred {:?}, target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = T::from_usize_lossy(pred.nrows().max(1));
    let mut total = T::zero();
    for (p, t) in pred.rows().into_iter().zip(target.rows()) {
        total += loss_cont(p, t)?;
    }
    let scale = T::one() / (n * T::from_usize_lossy(pred.ncols()));
    let grad = Array2::from_shape_fn(pred.dim(), |(r, i)| {
        let d = pred[[r, i]] - target[[r, i]];
        if d > T::zero() {
            scale
        } else if d < T::zero() {
            -scale
        } else {
            T::zero()
        }
    });
    Ok((total / n, grad))
}
