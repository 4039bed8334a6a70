//! Two-stream emotion recognition network.
//!
//! A body stream sees the 128x128 person crop and an image stream sees the
//! whole scene; their pooled features are concatenated and read out by two
//! parallel linear heads (26 category scores, 3 VAD values). The PAS image
//! enters in one of four ways selected by [`ModelVariant`].

mod backbone;
pub mod checkpoint;
mod cont_in;

pub use backbone::{BackboneDescriptor, ResNetStream};
pub use cont_in::{cont_in_forward, ContInBlock, ContInConfig};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, Array4, Axis, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops;
use crate::nn::{adaptive_avg_pool, join, Linear, Mode, Param, Parameterized};
use crate::scalar::Scalar;

pub const NUM_VAD: usize = 3;
pub const DEFAULT_NUM_CATEGORIES: usize = 26;
/// Centre of the 1..10 VAD scale; the VAD head's bias starts here.
pub const VAD_CENTRE: f64 = 5.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// Plain two-stream network; the PAS input is ignored.
    Baseline,
    /// PAS luminance appended as a fourth body-stream input channel.
    EarlyFusion,
    /// Pooled PAS descriptor concatenated with the fused stream features.
    LateFusion,
    /// Context-infusion blocks in the body stream.
    ContInBody,
    /// Context-infusion blocks in both streams.
    ContInBoth,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Baseline,
        ModelVariant::EarlyFusion,
        ModelVariant::LateFusion,
        ModelVariant::ContInBody,
        ModelVariant::ContInBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::EarlyFusion => "early_fusion",
            ModelVariant::LateFusion => "late_fusion",
            ModelVariant::ContInBody => "cont_in_body",
            ModelVariant::ContInBoth => "cont_in_both",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub backbone: BackboneDescriptor,
    pub cont_in: ContInConfig,
    /// Square input size of the scene stream.
    pub image_size: usize,
    /// Square input size of the body stream (and of the PAS image).
    pub body_size: usize,
    pub num_categories: usize,
    /// Late fusion pools the grayscale PAS to this square grid.
    pub late_fusion_grid: usize,
    pub pretrained: bool,
    pub pretrained_path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::ContInBody,
            backbone: BackboneDescriptor::default(),
            cont_in: ContInConfig::default(),
            image_size: 224,
            body_size: 128,
            num_categories: DEFAULT_NUM_CATEGORIES,
            late_fusion_grid: 8,
            pretrained: false,
            pretrained_path: None,
        }
    }
}

/// One batch of network inputs, all `N x C x H x W`.
#[derive(Debug, Clone)]
pub struct ModelInputs<T> {
    pub full_image: Array4<T>,
    pub body_crop: Array4<T>,
    pub pas: Array4<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionOutput<T> {
    /// `N x categories`, raw (no activation).
    pub cat_logits: Array2<T>,
    /// `N x 3`, unbounded; evaluation clamps to [1, 10].
    pub vad: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct PeriModel<T> {
    pub config: ModelConfig,
    pub body: ResNetStream<T>,
    pub image: ResNetStream<T>,
    pub cat_head: Linear<T>,
    pub vad_head: Linear<T>,
    body_dim: usize,
}

/// Builds a freshly initialized model, loading stock backbone weights when
/// `config.pretrained` is set.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<PeriModel<T>> {
    config.cont_in.validate()?;
    config.backbone.blocks_per_stage()?;
    if config.num_categories == 0 {
        return Err(Error::Config("model.num_categories must be > 0".into()));
    }
    if config.body_size < 32 || config.image_size < 32 {
        return Err(Error::Config("model input sizes must be at least 32".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = config.variant;
    let body_cont_in = matches!(variant, ModelVariant::ContInBody | ModelVariant::ContInBoth)
        .then_some(&config.cont_in);
    let image_cont_in = (variant == ModelVariant::ContInBoth).then_some(&config.cont_in);
    let body_in = if variant == ModelVariant::EarlyFusion { 4 } else { 3 };

    let mut body = ResNetStream::new(&config.backbone, body_in, body_cont_in, &mut rng)?;
    if variant == ModelVariant::EarlyFusion {
        zero_extra_input_channel(&mut body);
    }
    let image = ResNetStream::new(&config.backbone, 3, image_cont_in, &mut rng)?;
    let feat = config.backbone.feature_dim();
    let fused = fused_dim(variant, feat, feat, config.late_fusion_grid);
    let cat_head = Linear::new(fused, config.num_categories, &mut rng);
    let mut vad_head = Linear::new(fused, NUM_VAD, &mut rng);
    vad_head.bias.value.fill(T::lit(VAD_CENTRE));

    let mut model = PeriModel {
        config: config.clone(),
        body,
        image,
        cat_head,
        vad_head,
        body_dim: feat,
    };
    if config.pretrained {
        let path = config
            .pretrained_path
            .as_ref()
            .ok_or_else(|| Error::PretrainedUnavailable("model.pretrained is set but model.pretrained_path is not".into()))?;
        model.load_pretrained_backbone(path)?;
    }
    Ok(model)
}

fn zero_extra_input_channel<T: Scalar>(stream: &mut ResNetStream<T>) {
    let mut params = Vec::new();
    stream.collect_backbone_params_mut("", &mut params);
    let (_, w) = params
        .into_iter()
        .find(|(n, _)| n == "conv1.weight")
        .expect("stem weight");
    w.value
        .slice_each_axis_mut(|ax| {
            if ax.axis.index() == 1 {
                ndarray::Slice::from(3..)
            } else {
                ndarray::Slice::from(..)
            }
        })
        .fill(T::zero());
}

fn fused_dim(variant: ModelVariant, body: usize, image: usize, grid: usize) -> usize {
    body + image
        + if variant == ModelVariant::LateFusion {
            grid * grid
        } else {
            0
        }
}

/// Grayscale PAS, `N x 1 x H x W`.
fn pas_luminance<T: Scalar>(pas: &Array4<T>) -> Array4<T> {
    let (n, _, h, w) = pas.dim();
    let mut out = Array4::zeros((n, 1, h, w));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(pas.axis_iter(Axis(0))) {
        dst.index_axis_mut(Axis(0), 0).assign(&imageops::luminance(src));
    }
    out
}

/// Concatenates pooled stream features; late fusion also appends a
/// `grid x grid` average-pooled grayscale PAS descriptor.
pub fn fuse_streams<T: Scalar>(
    body_feat: &Array2<T>,
    image_feat: &Array2<T>,
    variant: ModelVariant,
    pas: &Array4<T>,
    grid: usize,
) -> Result<Array2<T>> {
    if body_feat.nrows() != image_feat.nrows() {
        return Err(Error::Shape(format!(
            "stream batch sizes differ: {} vs {}",
            body_feat.nrows(),
            image_feat.nrows()
        )));
    }
    let mut parts = vec![body_feat.view(), image_feat.view()];
    let descriptor;
    if variant == ModelVariant::LateFusion {
        if pas.dim().0 != body_feat.nrows() {
            return Err(Error::Shape("PAS batch size differs from features".into()));
        }
        let pooled = adaptive_avg_pool(&pas_luminance(pas), grid, grid);
        descriptor = pooled
            .into_shape_with_order((body_feat.nrows(), grid * grid))
            .expect("contiguous pooled PAS");
        parts.push(descriptor.view());
    }
    Ok(concatenate(Axis(1), &parts).expect("matching rows"))
}

impl<T: Scalar> PeriModel<T> {
    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn fused_dim(&self) -> usize {
        self.cat_head.in_features
    }

    fn check_inputs(&self, inputs: &ModelInputs<T>) -> Result<()> {
        let n = inputs.body_crop.dim().0;
        let b = self.config.body_size;
        let i = self.config.image_size;
        let expect = |name: &str, got: (usize, usize, usize, usize), want: (usize, usize, usize, usize)| {
            if got != want {
                Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        expect("body_crop", inputs.body_crop.dim(), (n, 3, b, b))?;
        expect("full_image", inputs.full_image.dim(), (n, 3, i, i))?;
        expect("pas", inputs.pas.dim(), (n, 3, b, b))
    }

    pub fn forward(&mut self, inputs: &ModelInputs<T>, mode: Mode) -> Result<EmotionOutput<T>> {
        self.check_inputs(inputs)?;
        let variant = self.config.variant;
        let body_feat = match variant {
            ModelVariant::EarlyFusion => {
                let x = concatenate(Axis(1), &[inputs.body_crop.view(), pas_luminance(&inputs.pas).view()])
                    .expect("matching dims");
                self.body.forward(&x, None, mode)?
            }
            ModelVariant::ContInBody | ModelVariant::ContInBoth => {
                self.body.forward(&inputs.body_crop, Some(&inputs.pas), mode)?
            }
            ModelVariant::Baseline | ModelVariant::LateFusion => self.body.forward(&inputs.body_crop, None, mode)?,
        };
        let image_pas = (variant == ModelVariant::ContInBoth).then_some(&inputs.pas);
        let image_feat = self.image.forward(&inputs.full_image, image_pas, mode)?;
        let fused = fuse_streams(&body_feat, &image_feat, variant, &inputs.pas, self.config.late_fusion_grid)?;
        Ok(EmotionOutput {
            cat_logits: self.cat_head.forward(&fused, mode)?,
            vad: self.vad_head.forward(&fused, mode)?,
        })
    }

    /// Backpropagates head-output gradients through the whole network.
    pub fn backward(&mut self, dcat: &Array2<T>, dvad: &Array2<T>) {
        let mut dfused = self.cat_head.backward(dcat);
        dfused += &self.vad_head.backward(dvad);
        let body_dim = self.body_dim;
        let image_dim = self.config.backbone.feature_dim();
        let dbody = dfused.slice(s![.., ..body_dim]).to_owned();
        let dimage = dfused.slice(s![.., body_dim..body_dim + image_dim]).to_owned();
        self.body.backward(&dbody);
        self.image.backward(&dimage);
    }

    /// Trainable scalars owned by context-infusion blocks.
    pub fn cont_in_param_count(&self) -> usize {
        self.body
            .cont_in_blocks()
            .chain(self.image.cont_in_blocks())
            .map(|(_, b)| b.trainable_count())
            .sum()
    }

    /// Loads stock backbone tensors (unprefixed names such as
    /// `layer1.0.conv1.weight`) into both streams. A 3-channel stem is
    /// widened for early fusion with the extra channel zeroed.
    pub fn load_pretrained_backbone(&mut self, path: &std::path::Path) -> Result<()> {
        let archive = checkpoint::read_archive(path)
            .map_err(|e| Error::PretrainedUnavailable(format!("{}: {e}", path.display())))?;
        for stream in [&mut self.body, &mut self.image] {
            let mut params = Vec::new();
            stream.collect_backbone_params_mut("", &mut params);
            for (name, param) in params {
                let src = archive
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::PretrainedUnavailable(format!("{}: missing tensor {name}", path.display())))?;
                let want = param.value.shape().to_vec();
                if src.shape() == want.as_slice() {
                    param.value = src.mapv(T::lit);
                } else if name == "conv1.weight"
                    && src.ndim() == 4
                    && want.len() == 4
                    && src.shape()[1] == 3
                    && want[1] == 4
                    && src.shape()[0] == want[0]
                {
                    param.value.fill(T::zero());
                    param
                        .value
                        .slice_each_axis_mut(|ax| {
                            if ax.axis.index() == 1 {
                                ndarray::Slice::from(..3)
                            } else {
                                ndarray::Slice::from(..)
                            }
                        })
                        .assign(&src.mapv(T::lit));
                } else {
                    return Err(Error::PretrainedUnavailable(format!(
                        "{}: tensor {name} has shape {:?}, model expects {want:?}",
                        path.display(),
                        src.shape()
                    )));
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Parameterized<T> for PeriModel<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.body.collect_params(&join(prefix, "body"), out);
        self.image.collect_params(&join(prefix, "image"), out);
        self.cat_head.collect_params(&join(prefix, "cat_head"), out);
        self.vad_head.collect_params(&join(prefix, "vad_head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.body.collect_params_mut(&join(prefix, "body"), out);
        self.image.collect_params_mut(&join(prefix, "image"), out);
        self.cat_head.collect_params_mut(&join(prefix, "cat_head"), out);
        self.vad_head.collect_params_mut(&join(prefix, "vad_head"), out);
    }
}

/// Scores for a single sample, as plain vectors.
pub fn split_rows<T: Scalar>(m: &Array2<T>) -> Vec<Vec<T>> {
    m.view()
        .into_dimensionality::<Ix2>()
        .expect("2-d")
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect()
}
