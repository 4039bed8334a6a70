//! Context-infusion block.
//!
//! The PAS image is encoded by `g` (adaptive average pooling to
//! `2^depth` times the feature grid, then `depth` stride-2 conv + ReLU
//! layers ending at `C` channels). The encoding is concatenated in front of
//! the backbone features along the channel axis and projected back to `C`
//! channels by a 1x1 conv, ReLU and batch norm. The block is shape-preserving,
//! so it can sit between any two stock residual stages.

use ndarray::{concatenate, s, Array4, Axis, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Mode, Param, Parameterized, Relu};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContInConfig {
    /// Number of conv + activation layers in the PAS encoder.
    pub g_depth: usize,
    pub kernel_size: usize,
    /// Backbone stages (1-based) whose output is modulated.
    pub insert_stages: Vec<usize>,
}

impl Default for ContInConfig {
    fn default() -> Self {
        ContInConfig {
            g_depth: 2,
            kernel_size: 3,
            insert_stages: vec![1, 2, 3],
        }
    }
}

impl ContInConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g_depth == 0 {
            return Err(Error::Config("cont_in.g_depth must be >= 1".into()));
        }
        if self.kernel_size == 0 {
            return Err(Error::Config("cont_in.kernel_size must be >= 1".into()));
        }
        if let Some(bad) = self.insert_stages.iter().find(|s| !(1..=4).contains(*s)) {
            return Err(Error::Config(format!("cont_in.insert_stages: stage {bad} not in 1..=4")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ContInBlock<T> {
    /// Channel count `C` of the modulated feature map (also `g`'s output width).
    pub channels: usize,
    pub pas_channels: usize,
    pub depth: usize,
    pool: AdaptiveAvgPool2d,
    g_convs: Vec<Conv2d<T>>,
    g_acts: Vec<Relu<Ix4>>,
    fuse: Conv2d<T>,
    fuse_act: Relu<Ix4>,
    norm: BatchNorm2d<T>,
}

impl<T: Scalar> ContInBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, pas_channels: usize, cfg: &ContInConfig, rng: &mut R) -> Self {
        let pad = cfg.kernel_size / 2;
        let g_convs = (0..cfg.g_depth)
            .map(|i| {
                let cin = if i == 0 { pas_channels } else { channels };
                Conv2d::new(cin, channels, cfg.kernel_size, 2, pad, true, rng)
            })
            .collect();
        ContInBlock {
            channels,
            pas_channels,
            depth: cfg.g_depth,
            pool: AdaptiveAvgPool2d::new(),
            g_convs,
            g_acts: (0..cfg.g_depth).map(|_| Relu::new()).collect(),
            fuse: Conv2d::new(2 * channels, channels, 1, 1, 0, true, rng),
            fuse_act: Relu::new(),
            norm: BatchNorm2d::new(channels),
        }
    }

    /// `X' = BN(ReLU(conv1x1(g(P) ++ X)))`.
    pub fn forward(&mut self, x: &Array4<T>, pas: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(Error::Shape(format!(
                "cont-in block built for {} channels, features have {c}",
                self.channels
            )));
        }
        if pas.dim().0 != n || pas.dim().1 != self.pas_channels {
            return Err(Error::Shape(format!(
                "PAS batch {:?} does not match features {:?}",
                pas.dim(),
                x.dim()
            )));
        }
        let scale = 1usize << self.depth;
        let mut g = self.pool.forward(pas, h * scale, w * scale, mode);
        for (conv, act) in self.g_convs.iter_mut().zip(self.g_acts.iter_mut()) {
            g = act.forward(&conv.forward(&g, mode)?, mode);
        }
        if g.dim() != x.dim() {
            return Err(Error::Shape(format!(
                "PAS encoding {:?} does not match features {:?}",
                g.dim(),
                x.dim()
            )));
        }
        let fused = concatenate(Axis(1), &[g.view(), x.view()]).expect("matching dims");
        let y = self.fuse.forward(&fused, mode)?;
        let y = self.fuse_act.forward(&y, mode);
        self.norm.forward(&y, mode)
    }

    /// Returns the feature gradient and, when requested, the PAS gradient.
    pub fn backward(&mut self, dy: &Array4<T>, need_pas_grad: bool) -> (Array4<T>, Option<Array4<T>>) {
        let d = self.norm.backward(dy);
        let d = self.fuse_act.backward(&d);
        let dfused = self.fuse.backward(&d, true).expect("input grad requested");
        let c = self.channels;
        let mut dg = dfused.slice(s![.., ..c, .., ..]).to_owned();
        let dx = dfused.slice(s![.., c.., .., ..]).to_owned();
        for i in (1..self.g_convs.len()).rev() {
            dg = self.g_acts[i].backward(&dg);
            dg = self.g_convs[i].backward(&dg, true).expect("input grad requested");
        }
        dg = self.g_acts[0].backward(&dg);
        // The pool's cached size is simply overwritten by the next forward
        // when the PAS gradient is skipped.
        let dpas = self.g_convs[0]
            .backward(&dg, need_pas_grad)
            .map(|d| self.pool.backward(&d));
        (dx, dpas)
    }
}

impl<T: Scalar> Parameterized<T> for ContInBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, conv) in self.g_convs.iter().enumerate() {
            conv.collect_params(&join(prefix, &format!("g.{i}")), out);
        }
        self.fuse.collect_params(&join(prefix, "fuse"), out);
        self.norm.collect_params(&join(prefix, "norm"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, conv) in self.g_convs.iter_mut().enumerate() {
            conv.collect_params_mut(&join(prefix, &format!("g.{i}")), out);
        }
        self.fuse.collect_params_mut(&join(prefix, "fuse"), out);
        self.norm.collect_params_mut(&join(prefix, "norm"), out);
    }
}

/// Applies one context-infusion block to a feature map.
pub fn cont_in_forward<T: Scalar>(
    block: &mut ContInBlock<T>,
    x: &Array4<T>,
    pas: &Array4<T>,
    mode: Mode,
) -> Result<Array4<T>> {
    block.forward(x, pas, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_two_shape_at_stock_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ContInBlock::<f32>::new(128, 3, &ContInConfig::default(), &mut rng);
        let x = Array4::from_elem((1, 128, 16, 16), 0.5f32);
        let pas = Array4::zeros((1, 3, 128, 128));
        let y = block.forward(&x, &pas, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 128, 16, 16));
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn even_kernel_breaks_alignment_loudly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ContInConfig {
            kernel_size: 4,
            ..ContInConfig::default()
        };
        let mut block = ContInBlock::<f64>::new(4, 3, &cfg, &mut rng);
        let err = block
            .forward(&Array4::zeros((1, 4, 8, 8)), &Array4::zeros((1, 3, 64, 64)), Mode::Eval)
            .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn config_validation() {
        assert!(ContInConfig::default().validate().is_ok());
        let bad = ContInConfig {
            insert_stages: vec![0, 2],
            ..ContInConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
