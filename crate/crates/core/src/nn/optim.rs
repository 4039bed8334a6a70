//! First-order optimizers with name-keyed state, so state can be saved and
//! restored alongside the weights.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub settings: OptimizerSettings,
    /// Number of completed steps.
    pub step: u64,
    /// SGD velocity or Adam first moment.
    first: BTreeMap<String, ArrayD<T>>,
    /// Adam second moment.
    second: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(settings: OptimizerSettings) -> Self {
        Optimizer {
            settings,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: Vec<(String, &mut Param<T>)>) {
        self.step += 1;
        let s = &self.settings;
        let lr = T::lit(s.lr);
        let wd = T::lit(s.weight_decay);
        for (name, p) in params.into_iter().filter(|(_, p)| p.trainable) {
            let mut g = p.grad.clone();
            if s.weight_decay != 0.0 {
                g.zip_mut_with(&p.value, |g, &v| *g += wd * v);
            }
            match s.kind {
                OptimizerKind::Sgd => {
                    let mom = T::lit(s.momentum);
                    let v = self
                        .first
                        .entry(name)
                        .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    v.zip_mut_with(&g, |v, &g| *v = mom * *v + g);
                    p.value.zip_mut_with(v, |w, &v| *w -= lr * v);
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::lit(s.beta1), T::lit(s.beta2));
                    let eps = T::lit(s.eps);
                    let t = self.step as i32;
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (T::one() - b1) * g);
                    let v = self
                        .second
                        .entry(name)
                        .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
                    v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
                    ndarray::Zip::from(&mut p.value)
                        .and(&*m)
                        .and(&*v)
                        .for_each(|w, &m, &v| *w -= lr * (m / c1) / ((v / c2).sqrt() + eps));
                }
            }
        }
    }

    /// Flattened state tensors, named `first.<param>` / `second.<param>`.
    pub fn state_tensors(&self) -> Vec<(String, &ArrayD<T>)> {
        self.first
            .iter()
            .map(|(k, v)| (format!("first.{k}"), v))
            .chain(self.second.iter().map(|(k, v)| (format!("second.{k}"), v)))
            .collect()
    }

    pub fn restore_tensor(&mut self, name: &str, value: ArrayD<T>) -> bool {
        if let Some(k) = name.strip_prefix("first.") {
            self.first.insert(k.to_string(), value);
            true
        } else if let Some(k) = name.strip_prefix("second.") {
            self.second.insert(k.to_string(), value);
            true
        } else {
            false
        }
    }
}
