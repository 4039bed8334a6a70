//! Evaluation metrics: per-category average precision, mAP, and
//! per-dimension VAD L1 errors.
//!
//! AP is the non-interpolated ranked-retrieval definition: walk the samples
//! in descending score order and average the precision at the rank of every
//! positive. Equal scores are ordered by sample id (ascending), which makes
//! results independent of record order.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const VAD_MIN: f64 = 1.0;
pub const VAD_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord<T> {
    pub sample_id: String,
    pub cat_scores: Vec<T>,
    pub cat_truth: Vec<bool>,
    pub vad_pred: [T; 3],
    pub vad_truth: [T; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApOutcome<T> {
    Value(T),
    /// No positive sample; AP is undefined and the category is skipped.
    NoPositives,
}

impl<T: Copy> ApOutcome<T> {
    pub fn value(self) -> Option<T> {
        match self {
            ApOutcome::Value(v) => Some(v),
            ApOutcome::NoPositives => None,
        }
    }
}

fn ap_from_order<T: Scalar>(order: &[usize], truth: &[bool]) -> ApOutcome<T> {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return ApOutcome::NoPositives;
    }
    let mut hits = 0usize;
    let mut sum = T::zero();
    for (rank, &i) in order.iter().enumerate() {
        if truth[i] {
            hits += 1;
            sum += T::from_usize_lossy(hits) / T::from_usize_lossy(rank + 1);
        }
    }
    ApOutcome::Value(sum / T::from_usize_lossy(positives))
}

fn check_lengths<T>(scores: &[T], truth: &[bool]) -> Result<()> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} truth labels",
            scores.len(),
            truth.len()
        )));
    }
    Ok(())
}

fn by_score_desc<T: Scalar>(a: T, b: T) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// AP with ties broken by position (earlier first).
pub fn average_precision<T: Scalar>(scores: &[T], truth: &[bool]) -> Result<ApOutcome<T>> {
    check_lengths(scores, truth)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(scores[a], scores[b]));
    Ok(ap_from_order(&order, truth))
}

/// AP with ties broken by ascending sample id.
pub fn average_precision_by_id<T: Scalar>(scores: &[T], truth: &[bool], ids: &[&str]) -> Result<ApOutcome<T>> {
    check_lengths(scores, truth)?;
    if ids.len() != scores.len() {
        return Err(Error::Shape(format!("{} ids vs {} scores", ids.len(), scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(scores[a], scores[b]).then_with(|| ids[a].cmp(ids[b])));
    Ok(ap_from_order(&order, truth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult<T> {
    pub map: T,
    /// `None` where the category has no positive sample.
    pub per_category: Vec<Option<T>>,
}

impl<T: Scalar> MapResult<T> {
    pub fn evaluated(&self) -> usize {
        self.per_category.iter().filter(|v| v.is_some()).count()
    }
}

fn category_count<T>(records: &[EvalRecord<T>]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::Eval("no records to evaluate".into()))?;
    let k = first.cat_scores.len();
    if let Some(bad) = records
        .iter()
        .find(|r| r.cat_scores.len() != k || r.cat_truth.len() != k)
    {
        return Err(Error::Shape(format!(
            "record {} has {} scores / {} labels, expected {k}",
            bad.sample_id,
            bad.cat_scores.len(),
            bad.cat_truth.len()
        )));
    }
    Ok(k)
}

/// Unweighted mean AP over the categories that have at least one positive.
pub fn mean_ap<T: Scalar>(records: &[EvalRecord<T>]) -> Result<MapResult<T>> {
    let k = category_count(records)?;
    let ids: Vec<&str> = records.iter().map(|r| r.sample_id.as_str()).collect();
    let mut per_category = Vec::with_capacity(k);
    for c in 0..k {
        let scores: Vec<T> = records.iter().map(|r| r.cat_scores[c]).collect();
        let truth: Vec<bool> = records.iter().map(|r| r.cat_truth[c]).collect();
        per_category.push(average_precision_by_id(&scores, &truth, &ids)?.value());
    }
    let skipped: Vec<usize> = (0..k).filter(|&c| per_category[c].is_none()).collect();
    if !skipped.is_empty() {
        log::warn!("categories {skipped:?} have no positive samples; excluded from mAP");
    }
    let values: Vec<T> = per_category.iter().flatten().copied().collect();
    if values.is_empty() {
        return Err(Error::Eval("no category has a positive sample".into()));
    }
    let map = values.iter().copied().sum::<T>() / T::from_usize_lossy(values.len());
    Ok(MapResult { map, per_category })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadErrors<T> {
    pub valence: T,
    pub arousal: T,
    pub dominance: T,
    pub mean: T,
}

pub fn clamp_vad<T: Scalar>(v: T) -> T {
    v.max(T::lit(VAD_MIN)).min(T::lit(VAD_MAX))
}

/// Mean absolute error per dimension, predictions clamped to [1, 10] first.
pub fn vad_errors<T: Scalar>(records: &[EvalRecord<T>]) -> Result<VadErrors<T>> {
    if records.is_empty() {
        return Err(Error::Eval("no records to evaluate".into()));
    }
    let mut sums = [T::zero(); 3];
    for r in records {
        for (d, s) in sums.iter_mut().enumerate() {
            *s += (clamp_vad(r.vad_pred[d]) - r.vad_truth[d]).abs();
        }
    }
    let n = T::from_usize_lossy(records.len());
    let [v, a, d] = sums.map(|s| s / n);
    Ok(VadErrors {
        valence: v,
        arousal: a,
        dominance: d,
        mean: (v + a + d) / T::lit(3.0),
    })
}

/// Results table: one `(name, AP)` row per category, then `mAP`, `err_V`,
/// `err_A`, `err_D`, `mean_err`, and the config hash when given. Skipped
/// categories carry `NA`.
pub fn write_results_csv<T: Scalar>(
    path: &Path,
    category_names: &[String],
    map: &MapResult<T>,
    vad: &VadErrors<T>,
    config_hash: Option<&str>,
) -> Result<()> {
    if category_names.len() != map.per_category.len() {
        return Err(Error::Shape(format!(
            "{} category names for {} AP values",
            category_names.len(),
            map.per_category.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "value"])?;
    for (name, ap) in category_names.iter().zip(&map.per_category) {
        let value = ap.map_or_else(|| "NA".to_string(), |v| format!("{:.6}", v.as_f64()));
        w.write_record([name.as_str(), value.as_str()])?;
    }
    for (name, v) in [
        ("mAP", map.map),
        ("err_V", vad.valence),
        ("err_A", vad.arousal),
        ("err_D", vad.dominance),
        ("mean_err", vad.mean),
    ] {
        w.write_record([name, &format!("{:.6}", v.as_f64())])?;
    }
    if let Some(hash) = config_hash {
        w.write_record(["config_hash", hash])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
