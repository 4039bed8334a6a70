//! Prediction and evaluation: run a predictor over a split, write the
//! per-sample predictions file and the metrics table.
//!
//! `predictions.csv` has one row per sample:
//! `sample_id, score_<category>..., pred_v, pred_a, pred_d, true_categories,
//! true_v, true_a, true_d`, where predicted VAD is clamped to [1, 10] and
//! `true_categories` is `;`-separated. A `predictions.meta.json` sidecar
//! records where the samples came from so reports can find the images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, load_dataset, AssembleConfig, Augment, Dataset, Figure, Sample, Split};
use crate::data::{SHAPE_CATEGORY, SYNTHETIC_PALETTE};
use crate::error::{Error, Result};
use crate::metrics::{clamp_vad, mean_ap, vad_errors, write_results_csv, EvalRecord, MapResult, VadErrors};
use crate::model::checkpoint::{load_checkpoint, read_archive, CheckpointMeta};
use crate::model::PeriModel;
use crate::nn::Mode;
use crate::pasgen::PasCache;
use crate::scalar::Scalar;

use super::config::{Precision, RunConfig};
use super::RunInfo;

/// Raw model output for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub scores: Vec<f64>,
    pub vad: [f64; 3],
}

pub trait Predictor {
    fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<Prediction>>;
}

/// Batched inference with a trained model.
pub struct ModelPredictor<'a, T> {
    pub model: &'a mut PeriModel<T>,
    pub assemble: AssembleConfig,
    pub batch_size: usize,
    pub cache: Option<&'a PasCache>,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.batch_size.max(1)) {
            let batch = assemble_batch::<T>(chunk, &self.assemble, Augment::None, self.cache)?;
            let y = self.model.forward(&batch.inputs, Mode::Eval)?;
            for (i, id) in batch.ids.into_iter().enumerate() {
                let scores = y.cat_logits.row(i).iter().map(|v| v.as_f64()).collect();
                let vad = [0, 1, 2].map(|d| y.vad[[i, d]].as_f64());
                out.push(Prediction {
                    sample_id: id,
                    scores,
                    vad,
                });
            }
        }
        Ok(out)
    }
}

/// Reads the synthetic planted rule straight off the pixels: the torso's
/// centre pixel gives the palette colour, and a torso corner showing
/// background means the blob is an ellipse. Annotations are never consulted.
pub struct RuleOracle {
    vocabulary: Vec<String>,
}

impl RuleOracle {
    pub fn new(vocabulary: &[String]) -> Self {
        RuleOracle {
            vocabulary: vocabulary.to_vec(),
        }
    }

    fn read_one(&self, sample: &Sample) -> Result<Prediction> {
        let img = image::open(&sample.image_path)
            .map_err(|source| Error::Image {
                path: sample.image_path.clone(),
                source,
            })?
            .to_rgb8();
        let [x, y, w, h] = sample.bbox.map(|v| v.round() as u32);
        let fig = Figure { x, y, w, h };
        let top = fig.torso_top();
        let centre = img.get_pixel(x + w / 2, top + (y + h - top) / 2).0;
        let corner = img.get_pixel(x, top).0;
        let mut scores = vec![0.0; self.vocabulary.len()];
        let Some(color) = SYNTHETIC_PALETTE.iter().position(|(rgb, _, _)| *rgb == centre) else {
            return Ok(Prediction {
                sample_id: sample.sample_id.clone(),
                scores,
                vad: [5.5; 3],
            });
        };
        let (_, name, vad) = SYNTHETIC_PALETTE[color];
        let ellipse = corner != centre;
        for (slot, cat) in scores.iter_mut().zip(&self.vocabulary) {
            if cat == name || (ellipse && cat == SHAPE_CATEGORY) {
                *slot = 1.0;
            }
        }
        Ok(Prediction {
            sample_id: sample.sample_id.clone(),
            scores,
            vad,
        })
    }
}

impl Predictor for RuleOracle {
    fn predict(&mut self, samples: &[&Sample]) -> Result<Vec<Prediction>> {
        samples.iter().map(|s| self.read_one(s)).collect()
    }
}

pub fn eval_records(predictions: &[Prediction], samples: &[&Sample]) -> Result<Vec<EvalRecord<f64>>> {
    if predictions.len() != samples.len() {
        return Err(Error::Eval(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            if p.sample_id != s.sample_id {
                return Err(Error::Eval(format!("prediction {} paired with sample {}", p.sample_id, s.sample_id)));
            }
            Ok(EvalRecord {
                sample_id: p.sample_id.clone(),
                cat_scores: p.scores.clone(),
                cat_truth: s.label.categories.clone(),
                vad_pred: p.vad,
                vad_truth: s.label.vad,
            })
        })
        .collect()
}

pub fn score_predictions(predictions: &[Prediction], samples: &[&Sample]) -> Result<(MapResult<f64>, VadErrors<f64>)> {
    let records = eval_records(predictions, samples)?;
    Ok((mean_ap(&records)?, vad_errors(&records)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsMeta {
    pub source: String,
    pub split: Split,
    pub data_dir: PathBuf,
    pub config_hash: String,
    pub vocabulary: Vec<String>,
}

pub fn predictions_meta_path(predictions: &Path) -> PathBuf {
    predictions.with_extension("meta.json")
}

pub fn write_predictions(
    path: &Path,
    predictions: &[Prediction],
    samples: &[&Sample],
    vocabulary: &[String],
    meta: &PredictionsMeta,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    header.extend(vocabulary.iter().map(|c| format!("score_{c}")));
    header.extend(["pred_v", "pred_a", "pred_d", "true_categories", "true_v", "true_a", "true_d"].map(String::from));
    w.write_record(&header)?;
    for (p, s) in predictions.iter().zip(samples) {
        let mut row = vec![p.sample_id.clone()];
        row.extend(p.scores.iter().map(|v| v.to_string()));
        row.extend(p.vad.iter().map(|&v| clamp_vad(v).to_string()));
        let truth: Vec<&str> = s
            .label
            .categories
            .iter()
            .zip(vocabulary)
            .filter(|(&on, _)| on)
            .map(|(_, n)| n.as_str())
            .collect();
        row.push(truth.join(";"));
        row.extend(s.label.vad.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta_path = predictions_meta_path(path);
    fs::write(&meta_path, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&meta_path, e))
}

/// One parsed row of a predictions file.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub sample_id: String,
    pub scores: Vec<f64>,
    /// Clamped.
    pub vad: [f64; 3],
    pub true_categories: Vec<String>,
    pub true_vad: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionsFile {
    pub categories: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionsFile> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let bad = |m: String| Error::parse(path.display().to_string(), m);
    if header.get(0) != Some("sample_id") {
        return Err(bad("first column must be sample_id".into()));
    }
    let categories: Vec<String> = header
        .iter()
        .skip(1)
        .map_while(|h| h.strip_prefix("score_").map(String::from))
        .collect();
    let k = categories.len();
    let tail = ["pred_v", "pred_a", "pred_d", "true_categories", "true_v", "true_a", "true_d"];
    let got_tail: Vec<&str> = header.iter().skip(1 + k).collect();
    if k == 0 || got_tail != tail {
        return Err(bad(format!("unexpected columns {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}, column {}: {e}", line + 1, header.get(i).unwrap_or("?"))))
        };
        let scores = (1..=k).map(num).collect::<Result<Vec<_>>>()?;
        let vad = [num(k + 1)?, num(k + 2)?, num(k + 3)?];
        let true_categories = rec
            .get(k + 4)
            .unwrap_or("")
            .split(';')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let true_vad = [num(k + 5)?, num(k + 6)?, num(k + 7)?];
        rows.push(PredictionRow {
            sample_id: rec.get(0).unwrap_or("").to_string(),
            scores,
            vad,
            true_categories,
            true_vad,
        });
    }
    Ok(PredictionsFile { categories, rows })
}

#[derive(Debug, Clone)]
pub struct EvalOutputs {
    pub metrics_path: PathBuf,
    pub predictions_path: PathBuf,
    pub map: MapResult<f64>,
    pub vad: VadErrors<f64>,
}

/// Runs `predictor` over `dataset` and writes `metrics.csv`,
/// `predictions.csv` and its sidecar into `out_dir`.
pub fn evaluate_predictor(
    predictor: &mut dyn Predictor,
    dataset: &Dataset,
    out_dir: &Path,
    config_hash: &str,
    source: &str,
) -> Result<EvalOutputs> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    if samples.is_empty() {
        return Err(Error::Eval(format!("split {} has no samples", dataset.split)));
    }
    let predictions = predictor.predict(&samples)?;
    let (map, vad) = score_predictions(&predictions, &samples)?;
    let vocab = dataset.vocabulary.names();
    let metrics_path = out_dir.join("metrics.csv");
    write_results_csv(&metrics_path, vocab, &map, &vad, Some(config_hash))?;
    let predictions_path = out_dir.join("predictions.csv");
    let meta = PredictionsMeta {
        source: source.to_string(),
        split: dataset.split,
        data_dir: dataset.root.clone(),
        config_hash: config_hash.to_string(),
        vocabulary: vocab.to_vec(),
    };
    write_predictions(&predictions_path, &predictions, &samples, vocab, &meta)?;
    Ok(EvalOutputs {
        metrics_path,
        predictions_path,
        map,
        vad,
    })
}

pub fn check_vocabulary(checkpoint: &[String], dataset: &Dataset) -> Result<()> {
    if checkpoint != dataset.vocabulary.names() {
        return Err(Error::Eval(format!(
            "vocabulary mismatch: checkpoint has {} categories, dataset {} has {} (or a different order)",
            checkpoint.len(),
            dataset.root.display(),
            dataset.vocabulary.len()
        )));
    }
    Ok(())
}

/// Where `evaluate` writes by default: `<checkpoint dir>/eval/<split>`.
pub fn default_eval_dir(checkpoint: &Path, split: Split) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join("eval")
        .join(split.name())
}

pub(crate) fn checkpoint_run_info(meta: &CheckpointMeta) -> Result<RunInfo> {
    serde_json::from_value(meta.run.clone())
        .map_err(|e| Error::Checkpoint(format!("run metadata unreadable: {e}")))
}

fn evaluate_typed<T: Scalar>(
    checkpoint: &Path,
    split: Split,
    data_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<EvalOutputs> {
    let loaded = load_checkpoint::<T>(checkpoint)?;
    let info = checkpoint_run_info(&loaded.meta)?;
    let root = data_dir.map(Path::to_path_buf).unwrap_or(info.data_dir.clone());
    let dataset = load_dataset(&root, split)?;
    check_vocabulary(&loaded.meta.vocabulary, &dataset)?;
    let cfg: &RunConfig = &info.config;
    let mut model = loaded.model;
    let mut predictor = ModelPredictor {
        model: &mut model,
        assemble: AssembleConfig {
            image_size: cfg.model.image_size,
            body_size: cfg.model.body_size,
            pas: cfg.pas.clone(),
        },
        batch_size: cfg.train.eval_batch_size,
        cache: None,
    };
    evaluate_predictor(
        &mut predictor,
        &dataset,
        out_dir,
        &info.config_hash,
        &checkpoint.display().to_string(),
    )
}

/// Loads a checkpoint at its training precision and evaluates it on `split`.
/// The dataset defaults to the one the checkpoint was trained on.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    split: Split,
    data_dir: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<EvalOutputs> {
    let archive = read_archive(checkpoint)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", checkpoint.display())))?;
    let info = checkpoint_run_info(&meta)?;
    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_eval_dir(checkpoint, split));
    match info.config.precision {
        Precision::F32 => evaluate_typed::<f32>(checkpoint, split, data_dir, &out),
        Precision::F64 => evaluate_typed::<f64>(checkpoint, split, data_dir, &out),
    }
}

/// Evaluates the planted-rule oracle on a synthetic split.
pub fn evaluate_oracle(data_dir: &Path, split: Split, out_dir: &Path) -> Result<EvalOutputs> {
    let dataset = load_dataset(data_dir, split)?;
    let mut oracle = RuleOracle::new(dataset.vocabulary.names());
    evaluate_predictor(&mut oracle, &dataset, out_dir, "oracle", "rule_oracle")
}
