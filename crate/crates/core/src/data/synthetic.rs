//! Procedural desk-scale dataset with a planted labelling rule.
//!
//! Each image shows one "person": a flat-coloured torso blob (ellipse or
//! rectangle) under a skin-toned head disc, on a grey noise background.
//! Labels depend only on what is drawn:
//!
//! - the blob colour picks one category and a fixed VAD triple;
//! - an elliptical blob additionally turns on the shape category.
//!
//! Body landmarks lie on the blob and face landmarks on the head. About a
//! quarter of the samples have no face landmarks (detector miss).

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{annotation_path, vocabulary_path, write_annotations, AnnotationRecord, CategoryVocabulary, Split};
use crate::error::{Error, Result};
use crate::landmarks::{save_landmark_file, Landmark, LandmarkLayout, LandmarkSet};

/// The 26 category names written to the synthetic `vocab.json`.
pub const SYNTHETIC_VOCABULARY: [&str; 26] = [
    "Affection",
    "Anger",
    "Annoyance",
    "Anticipation",
    "Aversion",
    "Confidence",
    "Disapproval",
    "Disconnection",
    "Disquietment",
    "Doubt/Confusion",
    "Embarrassment",
    "Engagement",
    "Esteem",
    "Excitement",
    "Fatigue",
    "Fear",
    "Happiness",
    "Pain",
    "Peace",
    "Pleasure",
    "Sadness",
    "Sensitivity",
    "Suffering",
    "Surprise",
    "Sympathy",
    "Yearning",
];

/// `(rgb, category, vad)` per blob colour.
pub const SYNTHETIC_PALETTE: [([u8; 3], &str, [f64; 3]); 4] = [
    ([220, 40, 40], "Anger", [3.0, 8.0, 6.0]),
    ([40, 190, 60], "Peace", [7.0, 3.0, 5.0]),
    ([40, 80, 230], "Sadness", [2.0, 3.0, 3.0]),
    ([235, 215, 30], "Happiness", [9.0, 7.0, 7.0]),
];

/// Category switched on by an elliptical blob.
pub const SHAPE_CATEGORY: &str = "Engagement";
pub const HEAD_RGB: [u8; 3] = [240, 200, 160];
const FACE_MISS_RATE: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedTruth {
    /// Index into [`SYNTHETIC_PALETTE`].
    pub color: usize,
    pub ellipse: bool,
}

/// Category names and VAD implied by what was drawn.
pub fn planted_rule(truth: PlantedTruth) -> (Vec<&'static str>, [f64; 3]) {
    let (_, name, vad) = SYNTHETIC_PALETTE[truth.color];
    let mut cats = vec![name];
    if truth.ellipse {
        cats.push(SHAPE_CATEGORY);
    }
    (cats, vad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticOptions {
    pub n: usize,
    pub seed: u64,
    pub image_size: u32,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            n: 64,
            seed: 0,
            image_size: 128,
        }
    }
}

/// Split by index: 6 of every 8 samples train, then one val, one test.
pub fn split_of(index: usize) -> Split {
    match index % 8 {
        6 => Split::Val,
        7 => Split::Test,
        _ => Split::Train,
    }
}

/// Torso and head geometry inside an integer person box.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Figure {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Figure {
    /// First torso row; the head sits above it.
    pub fn torso_top(&self) -> u32 {
        self.y + self.h * 3 / 10
    }

    pub fn head(&self) -> (f64, f64, f64) {
        let r = (self.w.min(self.h * 3 / 10) as f64) * 0.4;
        let cx = self.x as f64 + (self.w - 1) as f64 / 2.0;
        let cy = self.y as f64 + (self.h * 3 / 10) as f64 / 2.0;
        (cx, cy, r)
    }

    pub fn in_torso(&self, px: u32, py: u32, ellipse: bool) -> bool {
        let top = self.torso_top();
        if px < self.x || px >= self.x + self.w || py < top || py >= self.y + self.h {
            return false;
        }
        if !ellipse {
            return true;
        }
        let cx = self.x as f64 + (self.w - 1) as f64 / 2.0;
        let cy = top as f64 + (self.y + self.h - 1 - top) as f64 / 2.0;
        let rx = self.w as f64 / 2.0;
        let ry = (self.y + self.h - top) as f64 / 2.0;
        let dx = (px as f64 - cx) / rx;
        let dy = (py as f64 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Pixel position to crop-normalized landmark coordinates.
    fn normalize(&self, px: f64, py: f64) -> Landmark {
        Landmark::at(
            (px - self.x as f64) / (self.w - 1) as f64,
            (py - self.y as f64) / (self.h - 1) as f64,
        )
    }
}

fn draw_figure(rng: &mut ChaCha8Rng, size: u32) -> Figure {
    let w = rng.random_range(size * 30 / 100..=size * 45 / 100);
    let h = rng.random_range(size * 55 / 100..=size * 85 / 100);
    let x = rng.random_range(0..=size - w);
    let y = rng.random_range(0..=size - h);
    Figure { x, y, w, h }
}

fn body_landmarks(rng: &mut ChaCha8Rng, fig: &Figure, ellipse: bool, count: usize) -> Vec<Landmark> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let px = rng.random_range(fig.x..fig.x + fig.w);
        let py = rng.random_range(fig.torso_top()..fig.y + fig.h);
        if fig.in_torso(px, py, ellipse) {
            out.push(fig.normalize(px as f64, py as f64));
        }
    }
    out
}

fn face_landmarks(rng: &mut ChaCha8Rng, fig: &Figure, count: usize) -> Vec<Landmark> {
    let (cx, cy, r) = fig.head();
    (0..count)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let d = r * rng.random_range(0.0f64..1.0).sqrt();
            fig.normalize(cx + d * a.cos(), cy + d * a.sin())
        })
        .collect()
}

fn render(rng: &mut ChaCha8Rng, size: u32, fig: &Figure, truth: PlantedTruth) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let color = SYNTHETIC_PALETTE[truth.color].0;
    let (hx, hy, hr) = fig.head();
    ImageBuffer::from_fn(size, size, |px, py| {
        let noise = rng.random_range(90u8..=166);
        let mut jitter = |c: u8| c.saturating_add(rng.random_range(0..12));
        let head = (px as f64 - hx).powi(2) + (py as f64 - hy).powi(2) <= hr * hr;
        if fig.in_torso(px, py, truth.ellipse) {
            Rgb(color)
        } else if head {
            Rgb(HEAD_RGB)
        } else {
            Rgb([jitter(noise), jitter(noise), jitter(noise)])
        }
    })
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes `n` samples under `dir`. Output is byte-identical for a fixed
/// `(n, seed, image_size)`.
pub fn make_synthetic(dir: &Path, opts: SyntheticOptions) -> Result<()> {
    if opts.n == 0 {
        return Err(Error::Parameter {
            name: "n",
            message: "need at least one sample".into(),
        });
    }
    if opts.image_size < 32 {
        return Err(Error::Parameter {
            name: "image_size",
            message: format!("{} is below the 32 pixel minimum", opts.image_size),
        });
    }
    for sub in ["images", "landmarks", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(write_err(&p))?;
    }
    let vocab = CategoryVocabulary::new(SYNTHETIC_VOCABULARY.iter().map(|s| s.to_string()).collect())?;
    vocab.save(&vocabulary_path(dir))?;

    let layout = LandmarkLayout::holistic();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut records: Vec<(Split, AnnotationRecord)> = Vec::with_capacity(opts.n);
    for i in 0..opts.n {
        let id = format!("syn_{i:04}");
        let truth = PlantedTruth {
            color: rng.random_range(0..SYNTHETIC_PALETTE.len()),
            ellipse: rng.random_bool(0.5),
        };
        let fig = draw_figure(&mut rng, opts.image_size);
        let face_missing = rng.random_bool(FACE_MISS_RATE);

        let img = render(&mut rng, opts.image_size, &fig, truth);
        let image_rel = format!("images/{id}.png");
        let image_path = dir.join(&image_rel);
        img.save(&image_path).map_err(|source| Error::Image {
            path: image_path.clone(),
            source,
        })?;

        let mut set = LandmarkSet::empty(layout.clone(), fig.w, fig.h);
        set.body = body_landmarks(&mut rng, &fig, truth.ellipse, layout.body);
        if !face_missing {
            set.face = face_landmarks(&mut rng, &fig, layout.face);
        }
        let landmark_rel = format!("landmarks/{id}.json");
        save_landmark_file(dir.join(&landmark_rel), &set)?;

        let (mut cats, vad) = planted_rule(truth);
        cats.sort_by_key(|c| vocab.index_of(c));
        records.push((
            split_of(i),
            AnnotationRecord {
                sample_id: id,
                image: image_rel,
                bbox: [fig.x as f64, fig.y as f64, fig.w as f64, fig.h as f64],
                categories: cats.into_iter().map(String::from).collect(),
                vad,
                landmarks: Some(landmark_rel),
            },
        ));
    }
    for split in Split::ALL {
        let recs: Vec<AnnotationRecord> = records
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, r)| r.clone())
            .collect();
        write_annotations(&annotation_path(dir, split), &recs)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_rule_examples() {
        let (cats, vad) = planted_rule(PlantedTruth { color: 0, ellipse: true });
        assert_eq!(cats, vec!["Anger", SHAPE_CATEGORY]);
        assert_eq!(vad, [3.0, 8.0, 6.0]);
        assert_eq!(planted_rule(PlantedTruth { color: 2, ellipse: false }).0, vec!["Sadness"]);
    }

    #[test]
    fn palette_names_are_in_vocabulary() {
        for (_, name, vad) in SYNTHETIC_PALETTE {
            assert!(SYNTHETIC_VOCABULARY.contains(&name));
            assert!(vad.iter().all(|v| (1.0..=10.0).contains(v)));
        }
        assert!(SYNTHETIC_VOCABULARY.contains(&SHAPE_CATEGORY));
    }

    #[test]
    fn split_pattern() {
        let splits: Vec<Split> = (0..8).map(split_of).collect();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 6);
        assert_eq!(splits[6], Split::Val);
        assert_eq!(splits[7], Split::Test);
    }

    #[test]
    fn ellipse_excludes_torso_corners() {
        let fig = Figure { x: 10, y: 10, w: 30, h: 60 };
        let top = fig.torso_top();
        assert!(fig.in_torso(10, top, false));
        assert!(!fig.in_torso(10, top, true));
        assert!(fig.in_torso(25, top + 20, true));
        assert!(!fig.in_torso(9, top, false));
    }
}
