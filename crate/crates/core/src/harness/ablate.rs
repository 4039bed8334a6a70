//! Ablation sweeps over model variants and Gaussian widths.
//!
//! A grid file is TOML with the sweep axes at the top level and a full run
//! config under `[base]`:
//!
//! ```toml
//! variants = ["baseline", "early_fusion", "late_fusion", "cont_in_body", "cont_in_both"]
//! sigmas = [3.0]
//! eval_split = "test"
//!
//! [base.paths]
//! output_dir = "runs/ablation"
//! [base.optimizer]
//! epochs = 10
//! ```
//!
//! Every `(variant, sigma)` pair trains under `<output_dir>/runs/` and is
//! evaluated on `eval_split` with its best checkpoint. Runs with the same
//! PAS parameters share one cache directory under `<output_dir>/pas_cache/`.
//! The comparison table is `<output_dir>/ablation.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::ModelVariant;

use super::config::RunConfig;
use super::evaluate::evaluate_checkpoint;
use super::train::{resolve_data_dir, train};

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<ModelVariant>,
    pub sigmas: Vec<f64>,
    pub eval_split: Split,
    pub base: RunConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            variants: ModelVariant::ALL.to_vec(),
            sigmas: vec![RunConfig::default().pas.sigma],
            eval_split: Split::Test,
            base: RunConfig::default(),
        }
    }
}

impl AblationGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let grid: AblationGrid = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.sigmas.is_empty() {
            return Err(Error::Config("ablation grid needs at least one variant and one sigma".into()));
        }
        self.base.validate()
    }

    /// Run configs in table order: variants outer, sigmas inner.
    pub fn runs(&self) -> Vec<(ModelVariant, f64, RunConfig)> {
        let out = &self.base.paths.output_dir;
        let mut runs = Vec::new();
        for &variant in &self.variants {
            for &sigma in &self.sigmas {
                let mut cfg = self.base.clone();
                cfg.model.variant = variant;
                cfg.pas.sigma = sigma;
                cfg.paths.output_dir = out.join("runs").join(format!("{variant}_sigma{sigma}"));
                cfg.paths.pas_cache_dir = Some(out.join("pas_cache").join(format!(
                    "sigma{}_rho{}_n{}",
                    sigma,
                    cfg.pas.effective_rho(),
                    cfg.pas.out_size
                )));
                cfg.train.pas_cache = true;
                runs.push((variant, sigma, cfg));
            }
        }
        runs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub sigma: f64,
    pub rho: f64,
    pub status: String,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub err_v: Option<f64>,
    pub err_a: Option<f64>,
    pub err_d: Option<f64>,
    pub mean_err: Option<f64>,
    pub config_hash: String,
    pub message: String,
}

fn run_one(cfg: &RunConfig, split: Split) -> Result<(f64, [f64; 4])> {
    let summary = train(cfg)?;
    let ckpt = summary.best_checkpoint.unwrap_or(summary.last_checkpoint);
    let eval_dir = cfg.paths.output_dir.join("eval").join(split.name());
    let out = evaluate_checkpoint(&ckpt, split, None, Some(&eval_dir))?;
    Ok((out.map.map, [out.vad.valence, out.vad.arousal, out.vad.dominance, out.vad.mean]))
}

/// Runs the whole grid. A failing run becomes a `failed` row; the others
/// still run.
pub fn ablate(grid: &AblationGrid) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    let out = &grid.base.paths.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // Generate the synthetic set once so every run reads the same files.
    let data_dir: PathBuf = resolve_data_dir(&grid.base)?;
    let mut rows = Vec::new();
    for (variant, sigma, mut cfg) in grid.runs() {
        cfg.paths.data_dir = Some(data_dir.clone());
        log::info!("ablation run {variant}, sigma {sigma}");
        let mut row = AblationRow {
            variant: variant.to_string(),
            sigma,
            rho: cfg.pas.effective_rho(),
            status: "ok".into(),
            map: None,
            err_v: None,
            err_a: None,
            err_d: None,
            mean_err: None,
            config_hash: cfg.hash(),
            message: String::new(),
        };
        match run_one(&cfg, grid.eval_split) {
            Ok((map, [v, a, d, mean])) => {
                row.map = Some(map);
                row.err_v = Some(v);
                row.err_a = Some(a);
                row.err_d = Some(d);
                row.mean_err = Some(mean);
            }
            Err(e) => {
                log::error!("ablation run {variant}, sigma {sigma} failed: {e}");
                row.status = "failed".into();
                row.message = format!("{}: {e}", e.kind());
            }
        }
        rows.push(row);
        write_table(&out.join(ABLATION_FILE), &rows)?;
    }
    Ok(rows)
}

pub fn write_table(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_covers_all_variants() {
        let g = AblationGrid::from_toml_str("").unwrap();
        assert_eq!(g.runs().len(), 5);
    }

    #[test]
    fn runs_follow_configured_order_and_share_caches_per_sigma() {
        let g = AblationGrid::from_toml_str(
            "variants = [\"cont_in_body\", \"baseline\"]\nsigmas = [1.0, 2.0]\n[base.pas]\nrho_mode = \"tied\"\n",
        )
        .unwrap();
        let runs = g.runs();
        let order: Vec<(ModelVariant, f64)> = runs.iter().map(|(v, s, _)| (*v, *s)).collect();
        assert_eq!(
            order,
            vec![
                (ModelVariant::ContInBody, 1.0),
                (ModelVariant::ContInBody, 2.0),
                (ModelVariant::Baseline, 1.0),
                (ModelVariant::Baseline, 2.0),
            ]
        );
        assert_eq!(runs[0].2.paths.pas_cache_dir, runs[2].2.paths.pas_cache_dir);
        assert_ne!(runs[0].2.paths.pas_cache_dir, runs[1].2.paths.pas_cache_dir);
        assert_ne!(runs[0].2.paths.output_dir, runs[2].2.paths.output_dir);
    }

    #[test]
    fn toml_round_trip() {
        let g = AblationGrid::from_toml_str("sigmas = [1.0, 2.5]\n[base.optimizer]\nepochs = 2\n").unwrap();
        assert_eq!(AblationGrid::from_toml_str(&g.to_toml().unwrap()).unwrap(), g);
    }

    #[test]
    fn empty_axes_are_rejected() {
        assert!(AblationGrid::from_toml_str("variants = []").is_err());
        assert!(AblationGrid::from_toml_str("sigmas = []").is_err());
    }
}
