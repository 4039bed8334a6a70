//! Dataset layer: annotation loading, split handling, and batch assembly.
//!
//! A dataset root holds
//!
//! ```text
//! vocab.json                   {"categories": ["Affection", ...]}
//! annotations/<split>.jsonl    one annotation object per line
//! images/...                   scene images (PNG)
//! landmarks/...                per-person landmark files (optional)
//! ```
//!
//! An annotation line looks like
//!
//! ```json
//! {"sample_id": "syn_0003", "image": "images/syn_0003.png",
//!  "bbox": [12, 20, 40, 70], "categories": ["Anger", "Aversion"],
//!  "vad": [3, 7, 4], "landmarks": "landmarks/syn_0003.json"}
//! ```
//!
//! Paths are relative to the dataset root. `bbox` is `[x, y, w, h]` in image
//! pixels and `vad` is on the 1-10 scale.

mod synthetic;

pub(crate) use synthetic::Figure;

pub use synthetic::{
    make_synthetic, planted_rule, split_of, PlantedTruth, SyntheticOptions, HEAD_RGB, SHAPE_CATEGORY, SYNTHETIC_PALETTE,
    SYNTHETIC_VOCABULARY,
};

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imageops;
use crate::landmarks::{load_landmark_file, LandmarkSet};
use crate::model::ModelInputs;
use crate::pasgen::{empty_pas, make_pas, PasCache, PasConfig};
use crate::scalar::Scalar;

pub const VAD_LOW: f64 = 1.0;
pub const VAD_HIGH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, val or test)")))
    }
}

/// Ordered category names, read from the dataset's `vocab.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    pub categories: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new(categories: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in &categories {
            if !seen.insert(name.as_str()) {
                return Err(Error::validation("vocab.categories", format!("duplicate name {name:?}")));
            }
        }
        if categories.is_empty() {
            return Err(Error::validation("vocab.categories", "empty vocabulary"));
        }
        Ok(CategoryVocabulary { categories })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: CategoryVocabulary =
            serde_json::from_str(&text).map_err(|e| Error::parse("vocab.json", e.to_string()))?;
        Self::new(raw.categories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn names(&self) -> &[String] {
        &self.categories
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionLabel {
    /// One flag per vocabulary entry.
    pub categories: Vec<bool>,
    pub vad: [f64; 3],
}

impl EmotionLabel {
    pub fn positive_names<'a>(&self, vocab: &'a CategoryVocabulary) -> Vec<&'a str> {
        self.categories
            .iter()
            .zip(vocab.names())
            .filter(|(&on, _)| on)
            .map(|(_, n)| n.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    /// Absolute (root-joined) image path.
    pub image_path: PathBuf,
    /// `[x, y, w, h]` in image pixels.
    pub bbox: [f64; 4],
    pub label: EmotionLabel,
    pub landmark_path: Option<PathBuf>,
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub image: String,
    pub bbox: [f64; 4],
    pub categories: Vec<String>,
    pub vad: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub split: Option<Split>,
    pub lines: usize,
    pub loaded: usize,
    /// `(sample_id, path)` of samples skipped because the image is missing.
    pub missing_images: Vec<(String, PathBuf)>,
    /// Samples whose declared landmark file does not exist (kept; the PAS
    /// falls back to zeros).
    pub missing_landmarks: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub split: Split,
    pub samples: Vec<Sample>,
    pub vocabulary: CategoryVocabulary,
    pub report: LoadReport,
}

pub fn annotation_path(root: &Path, split: Split) -> PathBuf {
    root.join("annotations").join(format!("{}.jsonl", split.name()))
}

pub fn vocabulary_path(root: &Path) -> PathBuf {
    root.join("vocab.json")
}

fn field(line: usize, name: impl fmt::Display) -> String {
    format!("line {line}: {name}")
}

fn check_vad(vad: &[f64; 3], line: usize) -> Result<()> {
    for (i, &v) in vad.iter().enumerate() {
        if !(VAD_LOW..=VAD_HIGH).contains(&v) {
            return Err(Error::validation(
                field(line, format_args!("vad[{i}]")),
                format!("{v} outside [{VAD_LOW}, {VAD_HIGH}]"),
            ));
        }
    }
    Ok(())
}

fn validate_record(rec: &AnnotationRecord, vocab: &CategoryVocabulary, line: usize) -> Result<EmotionLabel> {
    if rec.sample_id.is_empty() || rec.sample_id.contains(['/', '\\']) {
        return Err(Error::validation(field(line, "sample_id"), format!("invalid id {:?}", rec.sample_id)));
    }
    check_vad(&rec.vad, line)?;
    let [x, y, w, h] = rec.bbox;
    if !(w > 0.0 && h > 0.0) || !(x >= 0.0 && y >= 0.0) {
        return Err(Error::validation(
            field(line, "bbox"),
            format!("{:?} needs x, y >= 0 and w, h > 0", rec.bbox),
        ));
    }
    let mut categories = vec![false; vocab.len()];
    for name in &rec.categories {
        let idx = vocab
            .index_of(name)
            .ok_or_else(|| Error::validation(field(line, "categories"), format!("unknown category {name:?}")))?;
        categories[idx] = true;
    }
    if !categories.iter().any(|&c| c) {
        return Err(Error::validation(field(line, "categories"), "no positive category"));
    }
    Ok(EmotionLabel {
        categories,
        vad: rec.vad,
    })
}

/// Loads one split. Samples whose image file is missing are skipped and
/// listed in the report; any malformed or out-of-range annotation is an
/// error naming the line and field.
pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let vocabulary = CategoryVocabulary::load(&vocabulary_path(root))?;
    let path = annotation_path(root, split);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut report = LoadReport {
        split: Some(split),
        ..LoadReport::default()
    };
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(field(line_no, "annotation"), e.to_string()))?;
        let label = validate_record(&rec, &vocabulary, line_no)?;
        if !ids.insert(rec.sample_id.clone()) {
            return Err(Error::validation(
                field(line_no, "sample_id"),
                format!("duplicate id {:?}", rec.sample_id),
            ));
        }
        let image_path = root.join(&rec.image);
        let (iw, ih) = match image::image_dimensions(&image_path) {
            Ok(dims) => dims,
            Err(_) if !image_path.exists() => {
                log::warn!("{}: image {} missing, sample skipped", rec.sample_id, image_path.display());
                report.missing_images.push((rec.sample_id, image_path));
                continue;
            }
            Err(source) => return Err(Error::Image { path: image_path, source }),
        };
        let [x, y, w, h] = rec.bbox;
        if x + w > iw as f64 || y + h > ih as f64 {
            return Err(Error::validation(
                field(line_no, "bbox"),
                format!("{:?} exceeds the {iw}x{ih} image", rec.bbox),
            ));
        }
        let landmark_path = rec.landmarks.as_ref().map(|p| root.join(p));
        if let Some(p) = &landmark_path {
            if !p.exists() {
                report.missing_landmarks.push(rec.sample_id.clone());
            }
        }
        samples.push(Sample {
            sample_id: rec.sample_id,
            image_path,
            bbox: rec.bbox,
            label,
            landmark_path,
        });
    }
    report.loaded = samples.len();
    Ok(Dataset {
        root: root.to_path_buf(),
        split,
        samples,
        vocabulary,
        report,
    })
}

fn relative_to(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

/// Converts a loaded sample back into its annotation line.
pub fn to_record(sample: &Sample, root: &Path, vocab: &CategoryVocabulary) -> AnnotationRecord {
    AnnotationRecord {
        sample_id: sample.sample_id.clone(),
        image: relative_to(root, &sample.image_path),
        bbox: sample.bbox,
        categories: sample
            .label
            .positive_names(vocab)
            .into_iter()
            .map(String::from)
            .collect(),
        vad: sample.label.vad,
        landmarks: sample.landmark_path.as_ref().map(|p| relative_to(root, p)),
    }
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Ids present in more than one split (should be empty).
pub fn split_overlap(root: &Path) -> Result<BTreeSet<String>> {
    let mut seen: Vec<BTreeSet<String>> = Vec::new();
    let mut overlap = BTreeSet::new();
    for split in Split::ALL {
        let ids: BTreeSet<String> = load_dataset(root, split)?
            .samples
            .into_iter()
            .map(|s| s.sample_id)
            .collect();
        for other in &seen {
            overlap.extend(ids.intersection(other).cloned());
        }
        seen.push(ids);
    }
    Ok(overlap)
}

/// Spatial sizes of an assembled batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembleConfig {
    pub image_size: usize,
    pub body_size: usize,
    pub pas: PasConfig,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        AssembleConfig {
            image_size: 224,
            body_size: 128,
            pas: PasConfig::default(),
        }
    }
}

/// Horizontal-flip augmentation. Each sample is flipped or not by a hash of
/// `(seed, sample_id)`, so the decision does not depend on batch layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    None,
    Flip { seed: u64 },
}

impl Augment {
    pub fn flips(self, sample_id: &str) -> bool {
        match self {
            Augment::None => false,
            Augment::Flip { seed } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(sample_id.as_bytes());
                h.finalize()[0] & 1 == 1
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    pub inputs: ModelInputs<T>,
    /// `N x categories`, 0/1.
    pub categories: Array2<T>,
    /// `N x 3`.
    pub vad: Array2<T>,
    /// Samples whose PAS fell back to all zeros.
    pub pas_fallback: Vec<bool>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

struct Assembled<T> {
    full: Array3<T>,
    crop: Array3<T>,
    pas: Array3<T>,
    fallback: bool,
}

fn read_landmarks(sample: &Sample) -> Option<LandmarkSet> {
    let path = sample.landmark_path.as_ref()?;
    match load_landmark_file(path) {
        Ok(set) => Some(set),
        Err(e) => {
            log::warn!("{}: landmarks unreadable ({e}); using an all-zero PAS", sample.sample_id);
            None
        }
    }
}

fn quantize<T: Scalar>(img: &Array3<T>) -> Array3<T> {
    imageops::from_rgb8(&imageops::to_rgb8(img.view()))
}

fn assemble_one<T: Scalar>(
    sample: &Sample,
    cfg: &AssembleConfig,
    flip: bool,
    cache: Option<&PasCache>,
) -> Result<Assembled<T>> {
    let mut image = imageops::load_rgb::<T>(&sample.image_path)?;
    let mut bbox = sample.bbox;
    let (_, h, w) = image.dim();
    if flip {
        image = imageops::flip_horizontal(image.view());
        bbox[0] = w as f64 - bbox[0] - bbox[2];
    }
    let full = imageops::resize_bilinear(image.view(), cfg.image_size, cfg.image_size);
    let (x0, y0, x1, y1) = imageops::bbox_window(bbox, h, w);
    let window = image.slice(s![.., y0..y1, x0..x1]);
    let crop = imageops::resize_bilinear(window, cfg.body_size, cfg.body_size);

    // Cached PAS images are 8-bit, so with a cache every PAS is quantized the
    // same way whether it was a hit or a miss. Flipped samples bypass it.
    let use_cache = cache.filter(|_| !flip);
    if let Some(hit) = use_cache.and_then(|c| c.get::<T>(&sample.sample_id)) {
        return Ok(Assembled {
            full,
            crop,
            pas: hit.pixels,
            fallback: false,
        });
    }
    let (pas, fallback) = match read_landmarks(sample) {
        Some(set) => {
            let set = if flip { set.flipped_horizontal() } else { set };
            let pas = make_pas(window, &set, &cfg.pas, sample.sample_id.clone())?;
            if let Some(c) = use_cache {
                c.put(&pas)?;
            }
            (pas.pixels, false)
        }
        None => (empty_pas::<T>(cfg.pas.out_size, sample.sample_id.clone()).pixels, true),
    };
    let pas = if use_cache.is_some() { quantize(&pas) } else { pas };
    #[cfg(debug_assertions)]
    if cache.is_none() && cfg.pas.out_size == cfg.body_size {
        debug_assert!(
            pas.iter().zip(crop.iter()).all(|(&p, &c)| p == T::zero() || p == c),
            "PAS pixel outside crop support for {}",
            sample.sample_id
        );
    }
    Ok(Assembled {
        full,
        crop,
        pas,
        fallback,
    })
}

/// Reads, crops, and stacks a batch. Samples are processed in parallel and
/// stacked in input order, so the result does not depend on thread count.
pub fn assemble_batch<T: Scalar>(
    samples: &[&Sample],
    cfg: &AssembleConfig,
    augment: Augment,
    cache: Option<&PasCache>,
) -> Result<Batch<T>> {
    cfg.pas.validate()?;
    let n = samples.len();
    if n == 0 {
        return Err(Error::Shape("cannot assemble an empty batch".into()));
    }
    let k = samples[0].label.categories.len();
    let parts: Vec<Assembled<T>> = samples
        .par_iter()
        .map(|s| assemble_one(s, cfg, augment.flips(&s.sample_id), cache))
        .collect::<Result<_>>()?;
    let (is, bs, ps) = (cfg.image_size, cfg.body_size, cfg.pas.out_size);
    let mut full = Array4::zeros((n, 3, is, is));
    let mut crop = Array4::zeros((n, 3, bs, bs));
    let mut pas = Array4::zeros((n, 3, ps, ps));
    let mut categories = Array2::zeros((n, k));
    let mut vad = Array2::zeros((n, 3));
    for (i, (p, s)) in parts.iter().zip(samples).enumerate() {
        full.index_axis_mut(Axis(0), i).assign(&p.full);
        crop.index_axis_mut(Axis(0), i).assign(&p.crop);
        pas.index_axis_mut(Axis(0), i).assign(&p.pas);
        if s.label.categories.len() != k {
            return Err(Error::Shape(format!(
                "{} has {} category flags, batch has {k}",
                s.sample_id,
                s.label.categories.len()
            )));
        }
        for (j, &on) in s.label.categories.iter().enumerate() {
            categories[[i, j]] = if on { T::one() } else { T::zero() };
        }
        for d in 0..3 {
            vad[[i, d]] = T::lit(s.label.vad[d]);
        }
    }
    Ok(Batch {
        ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        inputs: ModelInputs {
            full_image: full,
            body_crop: crop,
            pas,
        },
        categories,
        vad,
        pas_fallback: parts.iter().map(|p| p.fallback).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(CategoryVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let v = CategoryVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(v.index_of("b"), Some(1));
    }

    #[test]
    fn vad_out_of_range_names_the_field() {
        let err = check_vad(&[0.5, 5.0, 5.0], 3).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "line 3: vad[0]"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(check_vad(&[1.0, 10.0, 5.5], 1).is_ok());
    }

    #[test]
    fn flip_decision_is_stable() {
        let a = Augment::Flip { seed: 3 };
        let flips: Vec<bool> = (0..64).map(|i| a.flips(&format!("s{i}"))).collect();
        assert_eq!(flips, (0..64).map(|i| a.flips(&format!("s{i}"))).collect::<Vec<_>>());
        assert!(flips.iter().any(|&f| f) && flips.iter().any(|&f| !f));
        assert!(!Augment::None.flips("s0"));
    }
}
