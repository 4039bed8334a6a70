//! Four-stage residual backbone (basic blocks) with optional context-infusion
//! blocks after any stage. Parameter names follow the common
//! `conv1 / bn1 / layerS.B.* / layerS.0.downsample.{0,1}` layout so stock
//! weight archives load without remapping.

use ndarray::{Array2, Array4, Axis, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cont_in::{ContInBlock, ContInConfig};
use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, MaxPool2d, Mode, Param, Parameterized, Relu};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneDescriptor {
    /// `resnet18` or `resnet34`.
    pub arch: String,
    /// Channel width of the first stage; 64 in the stock networks.
    pub base_width: usize,
}

impl Default for BackboneDescriptor {
    fn default() -> Self {
        BackboneDescriptor {
            arch: "resnet18".into(),
            base_width: 64,
        }
    }
}

impl BackboneDescriptor {
    pub fn blocks_per_stage(&self) -> Result<[usize; 4]> {
        match self.arch.as_str() {
            "resnet18" => Ok([2, 2, 2, 2]),
            "resnet34" => Ok([3, 4, 6, 3]),
            other => Err(Error::Config(format!(
                "unknown backbone {other:?}; expected resnet18 or resnet34"
            ))),
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    pub fn feature_dim(&self) -> usize {
        8 * self.base_width
    }

    /// Spatial size of each stage output for a square input.
    pub fn stage_sizes(input: usize) -> [usize; 4] {
        let stem = (input + 6 - 7) / 2 + 1;
        let (pooled, _) = MaxPool2d::out_dims(stem, stem);
        let half = |n: usize| (n + 2 - 3) / 2 + 1;
        let s2 = half(pooled);
        let s3 = half(s2);
        [pooled, s2, s3, half(s3)]
    }
}

#[derive(Debug, Clone)]
struct BasicBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    act1: Relu<Ix4>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    downsample: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    act_out: Relu<Ix4>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0, false, rng), BatchNorm2d::new(cout)));
        BasicBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(cout),
            act1: Relu::new(),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            downsample,
            act_out: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Array4<T>, mode: Mode) -> Result<Array4<T>> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.bn1.forward(&y, mode)?;
        let y = self.act1.forward(&y, mode);
        let y = self.conv2.forward(&y, mode)?;
        let mut y = self.bn2.forward(&y, mode)?;
        match &mut self.downsample {
            Some((conv, bn)) => {
                let short = conv.forward(x, mode)?;
                y += &bn.forward(&short, mode)?;
            }
            None => y += x,
        }
        Ok(self.act_out.forward(&y, mode))
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let d = self.act_out.backward(dy);
        let mut dx = match &mut self.downsample {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                conv.backward(&ds, true).expect("input grad requested")
            }
            None => d.clone(),
        };
        let dm = self.bn2.backward(&d);
        let dm = self.conv2.backward(&dm, true).expect("input grad requested");
        let dm = self.act1.backward(&dm);
        let dm = self.bn1.backward(&dm);
        dx += &self.conv1.backward(&dm, true).expect("input grad requested");
        dx
    }
}

impl<T: Scalar> Parameterized<T> for BasicBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.bn2.collect_params(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &self.downsample {
            conv.collect_params(&join(prefix, "downsample.0"), out);
            bn.collect_params(&join(prefix, "downsample.1"), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv1.collect_params_mut(&join(prefix, "conv1"), out);
        self.bn1.collect_params_mut(&join(prefix, "bn1"), out);
        self.conv2.collect_params_mut(&join(prefix, "conv2"), out);
        self.bn2.collect_params_mut(&join(prefix, "bn2"), out);
        if let Some((conv, bn)) = &mut self.downsample {
            conv.collect_params_mut(&join(prefix, "downsample.0"), out);
            bn.collect_params_mut(&join(prefix, "downsample.1"), out);
        }
    }
}

/// One feature-extraction stream: stem, four residual stages, global pooling.
#[derive(Debug, Clone)]
pub struct ResNetStream<T> {
    pub in_channels: usize,
    pub descriptor: BackboneDescriptor,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    act1: Relu<Ix4>,
    maxpool: MaxPool2d,
    stages: Vec<Vec<BasicBlock<T>>>,
    /// Indexed by stage (0-based); `Some` where a block modulates that stage's output.
    cont_in: Vec<Option<ContInBlock<T>>>,
    pooled_dims: Option<(usize, usize, usize, usize)>,
}

impl<T: Scalar> ResNetStream<T> {
    pub fn new<R: Rng + ?Sized>(
        descriptor: &BackboneDescriptor,
        in_channels: usize,
        cont_in: Option<&ContInConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = descriptor.blocks_per_stage()?;
        if descriptor.base_width == 0 {
            return Err(Error::Config("backbone.base_width must be > 0".into()));
        }
        let widths = descriptor.stage_widths();
        let conv1 = Conv2d::new(in_channels, widths[0], 7, 2, 3, false, rng);
        let mut stages = Vec::with_capacity(4);
        let mut cin = widths[0];
        for (s, (&cout, &count)) in widths.iter().zip(&blocks).enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let stage = (0..count)
                .map(|b| {
                    let (ci, st) = if b == 0 { (cin, stride) } else { (cout, 1) };
                    BasicBlock::new(ci, cout, st, rng)
                })
                .collect();
            stages.push(stage);
            cin = cout;
        }
        let mut blocks_ci = vec![None, None, None, None];
        if let Some(cfg) = cont_in {
            cfg.validate()?;
            for &s in &cfg.insert_stages {
                blocks_ci[s - 1] = Some(ContInBlock::new(widths[s - 1], 3, cfg, rng));
            }
        }
        Ok(ResNetStream {
            in_channels,
            descriptor: descriptor.clone(),
            conv1,
            bn1: BatchNorm2d::new(widths[0]),
            act1: Relu::new(),
            maxpool: MaxPool2d::new(),
            stages,
            cont_in: blocks_ci,
            pooled_dims: None,
        })
    }

    pub fn has_cont_in(&self) -> bool {
        self.cont_in.iter().any(Option::is_some)
    }

    pub fn cont_in_blocks(&self) -> impl Iterator<Item = (usize, &ContInBlock<T>)> {
        self.cont_in
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (i + 1, b)))
    }

    /// Returns pooled features `N x 8w`. `pas` is required when any
    /// context-infusion block is present.
    pub fn forward(&mut self, x: &Array4<T>, pas: Option<&Array4<T>>, mode: Mode) -> Result<Array2<T>> {
        let y = self.conv1.forward(x, mode)?;
        let y = self.bn1.forward(&y, mode)?;
        let y = self.act1.forward(&y, mode);
        let mut y = self.maxpool.forward(&y, mode);
        for (stage, block) in self.stages.iter_mut().zip(self.cont_in.iter_mut()) {
            for b in stage.iter_mut() {
                y = b.forward(&y, mode)?;
            }
            if let Some(block) = block {
                let pas = pas.ok_or_else(|| Error::Shape("context-infusion stream needs a PAS input".into()))?;
                y = block.forward(&y, pas, mode)?;
            }
        }
        if mode == Mode::Train {
            self.pooled_dims = Some(y.dim());
        }
        Ok(y.mean_axis(Axis(3))
            .and_then(|m| m.mean_axis(Axis(2)))
            .expect("non-empty feature map"))
    }

    /// Backpropagates a feature gradient; parameter gradients accumulate,
    /// input-image gradients are not formed.
    pub fn backward(&mut self, dfeat: &Array2<T>) {
        let (n, c, h, w) = self.pooled_dims.take().expect("stream backward without a training forward");
        let scale = T::one() / T::from_usize_lossy(h * w);
        let mut d = Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dfeat[[b, ch]] * scale);
        for (stage, block) in self.stages.iter_mut().zip(self.cont_in.iter_mut()).rev() {
            if let Some(block) = block {
                d = block.backward(&d, false).0;
            }
            for b in stage.iter_mut().rev() {
                d = b.backward(&d);
            }
        }
        let d = self.maxpool.backward(&d);
        let d = self.act1.backward(&d);
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d, false);
    }

    /// Parameters of the stock backbone only (no context-infusion blocks).
    pub fn collect_backbone_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        backbone_params_mut(&mut self.conv1, &mut self.bn1, &mut self.stages, prefix, out);
    }
}

fn backbone_params_mut<'a, T: Scalar>(
    conv1: &'a mut Conv2d<T>,
    bn1: &'a mut BatchNorm2d<T>,
    stages: &'a mut [Vec<BasicBlock<T>>],
    prefix: &str,
    out: &mut Vec<(String, &'a mut Param<T>)>,
) {
    conv1.collect_params_mut(&join(prefix, "conv1"), out);
    bn1.collect_params_mut(&join(prefix, "bn1"), out);
    for (s, stage) in stages.iter_mut().enumerate() {
        for (b, block) in stage.iter_mut().enumerate() {
            block.collect_params_mut(&join(prefix, &format!("layer{}.{b}", s + 1)), out);
        }
    }
}

impl<T: Scalar> Parameterized<T> for ResNetStream<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.bn1.collect_params(&join(prefix, "bn1"), out);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.collect_params(&join(prefix, &format!("layer{}.{b}", s + 1)), out);
            }
        }
        for (s, block) in self.cont_in.iter().enumerate() {
            if let Some(block) = block {
                block.collect_params(&join(prefix, &format!("cont_in.{}", s + 1)), out);
            }
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        backbone_params_mut(&mut self.conv1, &mut self.bn1, &mut self.stages, prefix, out);
        for (s, block) in self.cont_in.iter_mut().enumerate() {
            if let Some(block) = block {
                block.collect_params_mut(&join(prefix, &format!("cont_in.{}", s + 1)), out);
            }
        }
    }
}
