//! Holistic landmark ingestion.
//!
//! Landmarks arrive as one JSON file per person crop, produced offline by a
//! body-pose + face-mesh detector. Coordinates are normalized to the crop, so
//! the mask generator can project them onto any target resolution.
//!
//! ```json
//! { "layout": "holistic-33-468", "crop": {"w": 120, "h": 200},
//!   "body": [[0.51, 0.12], null, ...], "face": [[0.49, 0.08], ...] }
//! ```

use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const HOLISTIC_BODY_COUNT: usize = 33;
pub const HOLISTIC_FACE_COUNT: usize = 468;
pub const HOLISTIC_LAYOUT: &str = "holistic-33-468";

/// Detectors may overshoot the crop slightly; values inside this band are
/// clamped into [0, 1], values outside it reject the file.
pub const CLAMP_LOW: f64 = -0.5;
pub const CLAMP_HIGH: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub present: bool,
}

impl Landmark {
    pub fn at(x: f64, y: f64) -> Self {
        Landmark { x, y, present: true }
    }

    pub fn absent() -> Self {
        Landmark {
            x: 0.0,
            y: 0.0,
            present: false,
        }
    }
}

/// Declared landmark layout: `<name>-<body count>-<face count>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkLayout {
    pub name: String,
    pub body: usize,
    pub face: usize,
}

impl LandmarkLayout {
    pub fn holistic() -> Self {
        LandmarkLayout {
            name: "holistic".into(),
            body: HOLISTIC_BODY_COUNT,
            face: HOLISTIC_FACE_COUNT,
        }
    }

    pub fn parse(descriptor: &str) -> Result<Self> {
        let bad = || {
            Error::parse(
                "layout",
                format!("expected `<name>-<body>-<face>`, got {descriptor:?}"),
            )
        };
        let mut parts = descriptor.rsplitn(3, '-');
        let face = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let body = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let name = parts.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
        Ok(LandmarkLayout {
            name: name.to_string(),
            body,
            face,
        })
    }

    pub fn descriptor(&self) -> String {
        format!("{}-{}-{}", self.name, self.body, self.face)
    }

    pub fn total(&self) -> usize {
        self.body + self.face
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub layout: LandmarkLayout,
    pub body: Vec<Landmark>,
    pub face: Vec<Landmark>,
    pub crop_width: u32,
    pub crop_height: u32,
}

impl LandmarkSet {
    /// A set with every landmark absent (the "detector found nothing" case).
    pub fn empty(layout: LandmarkLayout, crop_width: u32, crop_height: u32) -> Self {
        LandmarkSet {
            body: vec![Landmark::absent(); layout.body],
            face: vec![Landmark::absent(); layout.face],
            layout,
            crop_width,
            crop_height,
        }
    }

    /// Body landmarks followed by face landmarks, the combined index `k`.
    pub fn iter(&self) -> impl Iterator<Item = &Landmark> {
        self.body.iter().chain(self.face.iter())
    }

    pub fn present_count(&self) -> usize {
        self.iter().filter(|l| l.present).count()
    }

    /// Mirrors every present landmark horizontally (x -> 1 - x).
    pub fn flipped_horizontal(&self) -> Self {
        let flip = |l: &Landmark| Landmark {
            x: if l.present { 1.0 - l.x } else { l.x },
            ..*l
        };
        LandmarkSet {
            body: self.body.iter().map(flip).collect(),
            face: self.face.iter().map(flip).collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Value {
        let encode = |pts: &[Landmark]| -> Value {
            Value::Array(
                pts.iter()
                    .map(|l| {
                        if l.present {
                            json!([l.x, l.y])
                        } else {
                            Value::Null
                        }
                    })
                    .collect(),
            )
        };
        let mut obj = Map::new();
        obj.insert("layout".into(), Value::String(self.layout.descriptor()));
        obj.insert(
            "crop".into(),
            json!({"w": self.crop_width, "h": self.crop_height}),
        );
        obj.insert("body".into(), encode(&self.body));
        obj.insert("face".into(), encode(&self.face));
        Value::Object(obj)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::parse("<root>", "expected a JSON object"))?;
        let layout = obj
            .get("layout")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse("layout", "missing or not a string"))?;
        let layout = LandmarkLayout::parse(layout)?;

        let crop = obj
            .get("crop")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::parse("crop", "missing or not an object"))?;
        let dim = |key: &str| -> Result<u32> {
            let field = format!("crop.{key}");
            let v = crop
                .get(key)
                .and_then(Value::as_u64)
                .ok_or_else(|| Error::parse(&field, "missing or not a non-negative integer"))?;
            if v == 0 || v > u32::MAX as u64 {
                return Err(Error::validation(field, format!("must be positive, got {v}")));
            }
            Ok(v as u32)
        };
        let crop_width = dim("w")?;
        let crop_height = dim("h")?;

        let body = parse_points(obj.get("body"), "body", layout.body)?;
        let face = parse_points(obj.get("face"), "face", layout.face)?;
        Ok(LandmarkSet {
            layout,
            body,
            face,
            crop_width,
            crop_height,
        })
    }
}

fn parse_points(value: Option<&Value>, field: &str, expected: usize) -> Result<Vec<Landmark>> {
    let arr = value
        .and_then(Value::as_array)
        .ok_or_else(|| Error::parse(field, "missing or not an array"))?;
    if arr.len() != expected {
        return Err(Error::validation(
            field,
            format!("layout declares {expected} entries, file has {}", arr.len()),
        ));
    }
    arr.iter()
        .enumerate()
        .map(|(i, entry)| {
            let name = format!("{field}[{i}]");
            match entry {
                Value::Null => Ok(Landmark::absent()),
                Value::Array(xy) if xy.len() == 2 => {
                    let x = xy[0]
                        .as_f64()
                        .ok_or_else(|| Error::parse(&name, "x is not a number"))?;
                    let y = xy[1]
                        .as_f64()
                        .ok_or_else(|| Error::parse(&name, "y is not a number"))?;
                    Ok(Landmark::at(
                        check_coord(x, &format!("{name}.x"))?,
                        check_coord(y, &format!("{name}.y"))?,
                    ))
                }
                _ => Err(Error::parse(&name, "expected [x, y] or null")),
            }
        })
        .collect()
}

fn check_coord(v: f64, field: &str) -> Result<f64> {
    if !v.is_finite() || !(CLAMP_LOW..=CLAMP_HIGH).contains(&v) {
        return Err(Error::validation(
            field,
            format!("coordinate {v} outside [{CLAMP_LOW}, {CLAMP_HIGH}]"),
        ));
    }
    if !(0.0..=1.0).contains(&v) {
        log::warn!("{field}: coordinate {v} clamped into [0, 1]");
        return Ok(v.clamp(0.0, 1.0));
    }
    Ok(v)
}

pub fn load_landmark_file(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    LandmarkSet::from_json(&value)
}

pub fn save_landmark_file(path: impl AsRef<Path>, set: &LandmarkSet) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(&set.to_json())?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Projects present landmarks to integer pixel coordinates `(px, py)` on a
/// `target_w x target_h` grid. Absent landmarks are skipped.
pub fn to_pixel_coords(set: &LandmarkSet, target_w: usize, target_h: usize) -> Vec<(usize, usize)> {
    assert!(target_w > 0 && target_h > 0, "target dimensions must be positive");
    let span_x = (target_w - 1) as f64;
    let span_y = (target_h - 1) as f64;
    set.iter()
        .filter(|l| l.present)
        .map(|l| {
            let px = (l.x.clamp(0.0, 1.0) * span_x).round() as usize;
            let py = (l.y.clamp(0.0, 1.0) * span_y).round() as usize;
            (px.min(target_w - 1), py.min(target_h - 1))
        })
        .collect()
}
