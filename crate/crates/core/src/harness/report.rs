//! Static per-sample result figures.
//!
//! For each sample in a predictions file the report writes `<sample_id>.svg`
//! with three panels: the scene image with the person box, grouped VAD bars
//! on a fixed [1, 10] axis (this model, each comparison file, ground truth),
//! and the top-k predicted categories marked correct or incorrect. The same
//! content goes to `report.csv`, one row per sample:
//! `sample_id, cat_1.., score_1.., correct_1.., <series>_v, <series>_a,
//! <series>_d ...` with series `model`, the comparison labels, then `truth`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;

use crate::data::{load_dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{clamp_vad, VAD_MAX, VAD_MIN};

use super::evaluate::{predictions_meta_path, read_predictions, PredictionRow, PredictionsMeta};

pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub predictions: PathBuf,
    pub compare: Vec<PathBuf>,
    pub k: usize,
    /// Defaults to `report/` next to the predictions file.
    pub out_dir: Option<PathBuf>,
    /// Overrides the dataset root recorded in the predictions sidecar.
    pub data_dir: Option<PathBuf>,
}

/// Everything drawn for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub sample_id: String,
    /// `(category, score, correct)`, best first.
    pub top: Vec<(String, f64, bool)>,
    /// `(series label, clamped VAD)`; model first, ground truth last.
    pub series: Vec<(String, [f64; 3])>,
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub out_dir: PathBuf,
    pub csv_path: PathBuf,
    pub entries: Vec<ReportEntry>,
    pub skipped: Vec<String>,
}

/// Top-k categories by score; ties keep vocabulary order.
pub fn top_k(row: &PredictionRow, categories: &[String], k: usize) -> Vec<(String, f64, bool)> {
    let mut idx: Vec<usize> = (0..row.scores.len()).collect();
    idx.sort_by(|&a, &b| row.scores[b].total_cmp(&row.scores[a]));
    idx.into_iter()
        .take(k)
        .map(|i| {
            let name = categories[i].clone();
            let correct = row.true_categories.contains(&name);
            (name, row.scores[i], correct)
        })
        .collect()
}

/// Label for each comparison file: the file stem, or for files named
/// `predictions.csv` the nearest enclosing run directory (skipping `eval`
/// and split directories).
fn series_labels(compare: &[PathBuf]) -> Vec<String> {
    let skip = ["eval", "train", "val", "test"];
    let mut labels: Vec<String> = Vec::new();
    for (i, p) in compare.iter().enumerate() {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut label = if stem == "predictions" {
            p.ancestors()
                .skip(1)
                .filter_map(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .find(|name| !skip.contains(&name.as_str()))
                .unwrap_or_default()
        } else {
            stem
        };
        if label.is_empty() || label == "model" || label == "truth" || labels.contains(&label) {
            label = format!("compare{}", i + 1);
        }
        labels.push(label);
    }
    labels
}

pub fn render_report(opts: &ReportOptions) -> Result<ReportOutput> {
    let preds = read_predictions(&opts.predictions)?;
    if opts.k == 0 || opts.k > preds.categories.len() {
        return Err(Error::Parameter {
            name: "k",
            message: format!("must be in 1..={}, got {}", preds.categories.len(), opts.k),
        });
    }
    let others = opts
        .compare
        .iter()
        .map(|p| read_predictions(p))
        .collect::<Result<Vec<_>>>()?;
    let labels = series_labels(&opts.compare);
    let other_maps: Vec<HashMap<&str, &PredictionRow>> = others
        .iter()
        .map(|f| f.rows.iter().map(|r| (r.sample_id.as_str(), r)).collect())
        .collect();

    let samples = load_samples(opts)?;
    let out_dir = opts.out_dir.clone().unwrap_or_else(|| {
        opts.predictions
            .parent()
            .unwrap_or(Path::new("."))
            .join("report")
    });
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for row in &preds.rows {
        let Some(sample) = samples.get(&row.sample_id) else {
            log::warn!("{}: not in the dataset, skipped", row.sample_id);
            skipped.push(row.sample_id.clone());
            continue;
        };
        let mut series = vec![("model".to_string(), row.vad.map(clamp_vad))];
        for (label, map) in labels.iter().zip(&other_maps) {
            match map.get(row.sample_id.as_str()) {
                Some(r) => series.push((label.clone(), r.vad.map(clamp_vad))),
                None => log::warn!("{}: missing from comparison {label}", row.sample_id),
            }
        }
        series.push(("truth".to_string(), row.true_vad.map(clamp_vad)));
        let entry = ReportEntry {
            sample_id: row.sample_id.clone(),
            top: top_k(row, &preds.categories, opts.k),
            series,
        };
        let svg = render_svg(&entry, sample)?;
        let path = out_dir.join(format!("{}.svg", row.sample_id));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        entries.push(entry);
    }
    let csv_path = out_dir.join(REPORT_FILE);
    write_report_csv(&csv_path, &entries, opts.k, &labels)?;
    Ok(ReportOutput {
        out_dir,
        csv_path,
        entries,
        skipped,
    })
}

fn load_samples(opts: &ReportOptions) -> Result<HashMap<String, Sample>> {
    let meta_path = predictions_meta_path(&opts.predictions);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: PredictionsMeta =
        serde_json::from_str(&text).map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?;
    let root = opts.data_dir.clone().unwrap_or(meta.data_dir);
    let ds = load_dataset(&root, meta.split)?;
    Ok(ds.samples.into_iter().map(|s| (s.sample_id.clone(), s)).collect())
}

fn write_report_csv(path: &Path, entries: &[ReportEntry], k: usize, compare: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_id".to_string()];
    for prefix in ["cat", "score", "correct"] {
        header.extend((1..=k).map(|i| format!("{prefix}_{i}")));
    }
    let names: Vec<&str> = std::iter::once("model")
        .chain(compare.iter().map(String::as_str))
        .chain(std::iter::once("truth"))
        .collect();
    for n in &names {
        header.extend(["v", "a", "d"].map(|d| format!("{n}_{d}")));
    }
    w.write_record(&header)?;
    for e in entries {
        let mut row = vec![e.sample_id.clone()];
        row.extend(e.top.iter().map(|t| t.0.clone()));
        row.extend(e.top.iter().map(|t| t.1.to_string()));
        row.extend(e.top.iter().map(|t| u8::from(t.2).to_string()));
        for n in &names {
            match e.series.iter().find(|(l, _)| l == n) {
                Some((_, v)) => row.extend(v.iter().map(|x| x.to_string())),
                None => row.extend(["", "", ""].map(String::from)),
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const WIDTH: f64 = 780.0;
const HEIGHT: f64 = 320.0;
const PANEL: f64 = 280.0;
const AXIS_TOP: f64 = 40.0;
const AXIS_BOTTOM: f64 = 280.0;
const BAR_LEFT: f64 = 340.0;
const GROUP_WIDTH: f64 = 80.0;
const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"];
const TRUTH_COLOR: &str = "#7f7f7f";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maps a VAD value (clamped to the axis) to its y coordinate.
pub fn vad_to_y(v: f64) -> f64 {
    let t = (clamp_vad(v) - VAD_MIN) / (VAD_MAX - VAD_MIN);
    AXIS_BOTTOM - t * (AXIS_BOTTOM - AXIS_TOP)
}

fn embedded_image(sample: &Sample) -> Result<(String, u32, u32)> {
    let img = image::open(&sample.image_path).map_err(|source| Error::Image {
        path: sample.image_path.clone(),
        source,
    })?;
    let (w, h) = (img.width(), img.height());
    let mut png = Vec::new();
    img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: sample.image_path.clone(),
            source,
        })?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    Ok((format!("data:image/png;base64,{b64}"), w, h))
}

fn render_svg(entry: &ReportEntry, sample: &Sample) -> Result<String> {
    let (href, iw, ih) = embedded_image(sample)?;
    let scale = PANEL / iw.max(ih) as f64;
    let (dw, dh) = (iw as f64 * scale, ih as f64 * scale);
    let [bx, by, bw, bh] = sample.bbox;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">{}</text>"#, escape(&entry.sample_id));
    let _ = writeln!(
        s,
        r#"<image x="10" y="30" width="{dw:.2}" height="{dh:.2}" href="{href}" preserveAspectRatio="none"/>"#
    );
    let _ = writeln!(
        s,
        r#"<rect class="bbox" x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="red" stroke-width="2"/>"#,
        10.0 + bx * scale,
        30.0 + by * scale,
        bw * scale,
        bh * scale
    );

    // VAD axis, 1 at the bottom and 10 at the top.
    let axis_x = BAR_LEFT - 10.0;
    let _ = writeln!(
        s,
        r#"<line class="vad-axis" data-min="{VAD_MIN}" data-max="{VAD_MAX}" x1="{axis_x}" y1="{AXIS_TOP}" x2="{axis_x}" y2="{AXIS_BOTTOM}" stroke="black"/>"#
    );
    for tick in 1..=10 {
        let y = vad_to_y(tick as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.2}" x2="{axis_x}" y2="{y:.2}" stroke="black"/><text x="{:.1}" y="{:.2}" text-anchor="end">{tick}</text>"#,
            axis_x - 4.0,
            axis_x - 6.0,
            y + 4.0
        );
    }
    let n = entry.series.len() as f64;
    let bar_w = (GROUP_WIDTH - 16.0) / n;
    for (g, dim) in ["V", "A", "D"].iter().enumerate() {
        let gx = BAR_LEFT + g as f64 * GROUP_WIDTH;
        let _ = writeln!(s, r#"<g class="vad-group" data-dim="{dim}">"#);
        for (i, (label, vad)) in entry.series.iter().enumerate() {
            let color = if label == "truth" {
                TRUTH_COLOR
            } else {
                SERIES_COLORS[i % SERIES_COLORS.len()]
            };
            let y = vad_to_y(vad[g]);
            let _ = writeln!(
                s,
                r#"<rect class="vad-bar" data-series="{}" data-value="{}" x="{:.2}" y="{y:.2}" width="{bar_w:.2}" height="{:.2}" fill="{color}"/>"#,
                escape(label),
                vad[g],
                gx + 8.0 + i as f64 * bar_w,
                AXIS_BOTTOM - y
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{dim}</text></g>"#,
            gx + GROUP_WIDTH / 2.0,
            AXIS_BOTTOM + 16.0
        );
    }
    for (i, (label, _)) in entry.series.iter().enumerate() {
        let color = if label == "truth" {
            TRUTH_COLOR
        } else {
            SERIES_COLORS[i % SERIES_COLORS.len()]
        };
        let y = AXIS_TOP - 24.0;
        let x = BAR_LEFT + i as f64 * 62.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x + 13.0,
            y + 9.0,
            escape(label)
        );
    }

    // Top-k list.
    let list_x = BAR_LEFT + 3.0 * GROUP_WIDTH + 30.0;
    let _ = writeln!(s, r#"<text x="{list_x}" y="{AXIS_TOP}" font-size="13">Top {}</text>"#, entry.top.len());
    for (i, (name, score, correct)) in entry.top.iter().enumerate() {
        let y = AXIS_TOP + 24.0 * (i + 1) as f64;
        let (mark, color) = if *correct { ("\u{2713}", "#2ca02c") } else { ("\u{2717}", "#d62728") };
        let _ = writeln!(
            s,
            r#"<text class="top-category" data-rank="{}" data-correct="{correct}" x="{list_x}" y="{y:.1}" fill="{color}">{mark} {} ({score:.2})</text>"#,
            i + 1,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scores: Vec<f64>, truth: &[&str]) -> PredictionRow {
        PredictionRow {
            sample_id: "s".into(),
            scores,
            vad: [5.0; 3],
            true_categories: truth.iter().map(|s| s.to_string()).collect(),
            true_vad: [5.0; 3],
        }
    }

    #[test]
    fn top_k_flags_against_truth() {
        let cats: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let top = top_k(&row(vec![0.1, 0.9, 0.5, 0.7], &["b", "c"]), &cats, 3);
        let names: Vec<&str> = top.iter().map(|t| t.0.as_str()).collect();
        assert_eq!(names, vec!["b", "d", "c"]);
        assert_eq!(top.iter().map(|t| t.2).collect::<Vec<_>>(), vec![true, false, true]);
    }

    #[test]
    fn axis_mapping_clamps() {
        assert_eq!(vad_to_y(1.0), AXIS_BOTTOM);
        assert_eq!(vad_to_y(10.0), AXIS_TOP);
        assert_eq!(vad_to_y(-4.0), AXIS_BOTTOM);
        assert_eq!(vad_to_y(42.0), AXIS_TOP);
    }

    #[test]
    fn comparison_labels_are_unique() {
        let labels = series_labels(&[
            PathBuf::from("runs/a/eval/test/predictions.csv"),
            PathBuf::from("runs/b/eval/test/predictions.csv"),
            PathBuf::from("other.csv"),
        ]);
        assert_eq!(series_labels(&[PathBuf::from("x.csv"), PathBuf::from("d/x.csv")]), vec!["x", "compare2"]);
        assert_eq!(labels, vec!["a", "b", "other"]);
    }
}
