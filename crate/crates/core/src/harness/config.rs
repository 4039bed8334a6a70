//! Run configuration, read from a TOML file in which every key is optional.
//!
//! ```toml
//! seed = 0
//! precision = "f32"           # or "f64"
//! deterministic = false       # PERI_DETERMINISTIC=1 also forces it
//!
//! [paths]
//! data_dir = "data/emotic"    # omit to generate a synthetic dataset
//! output_dir = "runs/default"
//! pas_cache_dir = "runs/default/pas_cache"
//!
//! [synthetic]                 # used when paths.data_dir is absent
//! n = 64
//! seed = 0
//! image_size = 128
//!
//! [model]
//! variant = "cont_in_body"    # baseline, early_fusion, late_fusion, cont_in_body, cont_in_both
//! image_size = 224
//! body_size = 128
//! num_categories = 26
//! late_fusion_grid = 8
//! pretrained = false
//! pretrained_path = "weights/resnet18.bin"
//! [model.backbone]
//! arch = "resnet18"           # or "resnet34"
//! base_width = 64
//! [model.cont_in]
//! g_depth = 2
//! kernel_size = 3
//! insert_stages = [1, 2, 3]
//!
//! [pas]
//! sigma = 3.0
//! rho = 3.0
//! rho_mode = "tied"           # effective rho = rho * sigma / 3; "fixed" uses rho as-is
//! out_size = 128              # must equal model.body_size
//!
//! [loss]
//! c = 1.2
//! lambda_cat = 1.0
//! lambda_cont = 1.0
//!
//! [optimizer]
//! kind = "sgd"                # or "adam"
//! lr = 0.001
//! momentum = 0.9              # sgd
//! weight_decay = 0.0
//! beta1 = 0.9                 # adam
//! beta2 = 0.999
//! eps = 1e-8
//! batch_size = 32
//! epochs = 30
//!
//! [train]
//! augment = false             # horizontal flips
//! pas_cache = false
//! eval_batch_size = 16
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SyntheticOptions;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::nn::optim::{OptimizerKind, OptimizerSettings};
use crate::pasgen::PasConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/pas_cache`.
    pub pas_cache_dir: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: None,
            output_dir: PathBuf::from("runs/default"),
            pas_cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub seed: u64,
    pub image_size: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let d = SyntheticOptions::default();
        SyntheticConfig {
            n: d.n,
            seed: d.seed,
            image_size: d.image_size,
        }
    }
}

impl SyntheticConfig {
    pub fn options(&self) -> SyntheticOptions {
        SyntheticOptions {
            n: self.n,
            seed: self.seed,
            image_size: self.image_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            epochs: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            kind: self.kind,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Random horizontal flips of image, crop and landmarks.
    pub augment: bool,
    /// Keep 8-bit PAS images under `<output_dir>/pas_cache/`.
    pub pas_cache: bool,
    /// Batch size used for validation and evaluation passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            augment: false,
            pas_cache: false,
            eval_batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Same as setting `PERI_DETERMINISTIC=1`.
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub pas: PasConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            deterministic: false,
            paths: PathsConfig::default(),
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            pas: PasConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pas.validate()?;
        self.loss.validate()?;
        self.model.cont_in.validate()?;
        self.model.backbone.blocks_per_stage()?;
        let o = &self.optimizer;
        if o.batch_size == 0 || self.train.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!("optimizer.lr must be positive, got {}", o.lr)));
        }
        if self.pas.out_size != self.model.body_size {
            return Err(Error::Config(format!(
                "pas.out_size ({}) must equal model.body_size ({})",
                self.pas.out_size, self.model.body_size
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Hash of everything a resumed run must share with the original; the
    /// epoch budget may grow.
    pub fn resume_key(&self) -> String {
        let mut c = self.clone();
        c.optimizer.epochs = 0;
        c.hash()
    }

    pub fn deterministic_requested(&self) -> bool {
        self.deterministic || deterministic_env()
    }
}

pub const DETERMINISTIC_ENV: &str = "PERI_DETERMINISTIC";

pub fn deterministic_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Sgd);
        assert_eq!(cfg.optimizer.batch_size, 32);
    }

    #[test]
    fn documented_example_shows_the_defaults() {
        let src = include_str!("config.rs");
        let text: String = src
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start_matches(' ').to_string() + "\n")
            .collect();
        let mut cfg = RunConfig::from_toml_str(&text).unwrap();
        cfg.paths.data_dir = None;
        cfg.paths.pas_cache_dir = None;
        cfg.model.pretrained_path = None;
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn dotted_sections_override() {
        let cfg = RunConfig::from_toml_str(
            "seed = 5\n[model]\nvariant = \"baseline\"\n[model.backbone]\nbase_width = 8\n[pas]\nsigma = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.model.backbone.base_width, 8);
        assert_eq!(cfg.pas.sigma, 2.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("sed = 1").is_err());
        assert!(RunConfig::from_toml_str("[loss]\nc = 0.9").is_err());
        assert!(RunConfig::from_toml_str("[optimizer]\nbatch_size = 0").is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut cfg = RunConfig::default();
        cfg.paths.data_dir = Some("d".into());
        let back = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
        other.seed = 0;
        other.optimizer.epochs = 99;
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(other.resume_key(), cfg.resume_key());
    }
}
