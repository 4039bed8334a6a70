use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use peri::data::{
    annotation_path, assemble_batch, load_dataset, make_synthetic, split_overlap, to_record, write_annotations,
    AssembleConfig, Augment, Split, SyntheticOptions,
};
use peri::landmarks::load_landmark_file;
use peri::pasgen::{PasCache, PasConfig};
use peri::Error;

fn synth(dir: &Path, n: usize, seed: u64) {
    make_synthetic(
        dir,
        SyntheticOptions {
            n,
            seed,
            image_size: 96,
        },
    )
    .unwrap();
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "images", "landmarks", "annotations"] {
        for entry in fs::read_dir(dir.join(sub)).unwrap() {
            let p = entry.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_output_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    synth(a.path(), 8, 7);
    synth(b.path(), 8, 7);
    synth(c.path(), 8, 8);
    let ta = tree(a.path());
    assert_eq!(ta.len(), 1 + 8 + 8 + 3);
    assert_eq!(ta, tree(b.path()));
    assert_ne!(ta, tree(c.path()));
}

#[test]
fn synthetic_splits_load_and_are_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 16, 1);
    let train = load_dataset(dir.path(), Split::Train).unwrap();
    let val = load_dataset(dir.path(), Split::Val).unwrap();
    let test = load_dataset(dir.path(), Split::Test).unwrap();
    assert_eq!((train.samples.len(), val.samples.len(), test.samples.len()), (12, 2, 2));
    assert_eq!(train.vocabulary.len(), 26);
    assert!(split_overlap(dir.path()).unwrap().is_empty());
    assert!(train.report.missing_images.is_empty());
}

#[test]
fn landmarks_fall_inside_the_person_box() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 3);
    for s in load_dataset(dir.path(), Split::Train).unwrap().samples {
        let set = load_landmark_file(s.landmark_path.as_ref().unwrap()).unwrap();
        assert_eq!((set.crop_width as f64, set.crop_height as f64), (s.bbox[2], s.bbox[3]));
        assert_eq!(set.body.iter().filter(|l| l.present).count(), 33);
        for l in set.iter().filter(|l| l.present) {
            assert!((0.0..=1.0).contains(&l.x) && (0.0..=1.0).contains(&l.y), "{l:?}");
        }
    }
}

#[test]
fn loader_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 2);
    let first = load_dataset(dir.path(), Split::Train).unwrap();
    let records: Vec<_> = first
        .samples
        .iter()
        .map(|s| to_record(s, dir.path(), &first.vocabulary))
        .collect();
    let path = annotation_path(dir.path(), Split::Train);
    let original = fs::read(&path).unwrap();
    write_annotations(&path, &records).unwrap();
    assert_eq!(fs::read(&path).unwrap(), original);
    let second = load_dataset(dir.path(), Split::Train).unwrap();
    assert_eq!(first.samples, second.samples);
}

fn write_val(dir: &Path, lines: &[&str]) {
    fs::write(annotation_path(dir, Split::Val), lines.join("\n") + "\n").unwrap();
}

#[test]
fn bad_vad_is_rejected_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 2);
    write_val(
        dir.path(),
        &[r#"{"sample_id":"x","image":"images/syn_0000.png","bbox":[1,1,10,10],"categories":["Anger"],"vad":[0.5,5,5]}"#],
    );
    match load_dataset(dir.path(), Split::Val) {
        Err(Error::Validation { field, .. }) => assert_eq!(field, "line 1: vad[0]"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn missing_image_is_reported_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 2);
    write_val(
        dir.path(),
        &[
            r#"{"sample_id":"a","image":"images/syn_0000.png","bbox":[1,1,10,10],"categories":["Anger"],"vad":[3,5,5]}"#,
            r#"{"sample_id":"b","image":"images/nope.png","bbox":[1,1,10,10],"categories":["Anger"],"vad":[3,5,5]}"#,
            r#"{"sample_id":"c","image":"images/syn_0001.png","bbox":[1,1,10,10],"categories":["Peace"],"vad":[3,5,5]}"#,
        ],
    );
    let ds = load_dataset(dir.path(), Split::Val).unwrap();
    assert_eq!(ds.samples.len(), 2);
    assert_eq!(ds.report.missing_images.len(), 1);
    assert_eq!(ds.report.missing_images[0].0, "b");
}

#[test]
fn bbox_outside_image_and_unknown_category_fail() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 2);
    write_val(
        dir.path(),
        &[r#"{"sample_id":"a","image":"images/syn_0000.png","bbox":[90,1,10,10],"categories":["Anger"],"vad":[3,5,5]}"#],
    );
    assert!(matches!(load_dataset(dir.path(), Split::Val), Err(Error::Validation { .. })));
    write_val(
        dir.path(),
        &[r#"{"sample_id":"a","image":"images/syn_0000.png","bbox":[1,1,10,10],"categories":["Grumpy"],"vad":[3,5,5]}"#],
    );
    assert!(matches!(load_dataset(dir.path(), Split::Val), Err(Error::Validation { .. })));
}

#[test]
fn batch_shapes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 4);
    let ds = load_dataset(dir.path(), Split::Train).unwrap();
    let refs: Vec<_> = ds.samples.iter().take(4).collect();
    let cfg = AssembleConfig::default();
    let a = assemble_batch::<f32>(&refs, &cfg, Augment::None, None).unwrap();
    let b = assemble_batch::<f32>(&refs, &cfg, Augment::None, None).unwrap();
    assert_eq!(a.inputs.full_image.dim(), (4, 3, 224, 224));
    assert_eq!(a.inputs.body_crop.dim(), (4, 3, 128, 128));
    assert_eq!(a.inputs.pas.dim(), (4, 3, 128, 128));
    assert_eq!(a.categories.dim(), (4, 26));
    assert_eq!(a.vad.dim(), (4, 3));
    assert_eq!(a.inputs.full_image, b.inputs.full_image);
    assert_eq!(a.inputs.pas, b.inputs.pas);
    assert!(a.pas_fallback.iter().all(|&f| !f));
    for i in 0..4 {
        assert!(a.inputs.pas.index_axis(ndarray::Axis(0), i).iter().any(|&v| v > 0.0));
    }
}

#[test]
fn missing_landmark_file_gives_zero_pas() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 4);
    let ds = load_dataset(dir.path(), Split::Train).unwrap();
    fs::remove_file(ds.samples[0].landmark_path.as_ref().unwrap()).unwrap();
    let refs: Vec<_> = ds.samples.iter().take(2).collect();
    let batch = assemble_batch::<f64>(&refs, &AssembleConfig::default(), Augment::None, None).unwrap();
    assert_eq!(batch.pas_fallback, vec![true, false]);
    assert!(batch.inputs.pas.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.0));
    assert_eq!(batch.inputs.pas.dim(), (2, 3, 128, 128));
}

#[test]
fn flip_augmentation_mirrors_all_inputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 5);
    let ds = load_dataset(dir.path(), Split::Train).unwrap();
    let cfg = AssembleConfig::default();
    let aug = (0..64)
        .map(|seed| Augment::Flip { seed })
        .find(|a| a.flips(&ds.samples[0].sample_id))
        .unwrap();
    let refs = vec![&ds.samples[0]];
    let plain = assemble_batch::<f64>(&refs, &cfg, Augment::None, None).unwrap();
    let flipped = assemble_batch::<f64>(&refs, &cfg, aug, None).unwrap();
    let mirror = |a: &ndarray::Array4<f64>| a.slice(ndarray::s![.., .., .., ..;-1]).to_owned();
    let close = |a: &ndarray::Array4<f64>, b: &ndarray::Array4<f64>| {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-9)
    };
    assert!(close(&mirror(&plain.inputs.full_image), &flipped.inputs.full_image));
    assert!(close(&mirror(&plain.inputs.body_crop), &flipped.inputs.body_crop));
    // Landmark rounding may shift a disc edge by one pixel, so compare supports loosely.
    let support = |a: &ndarray::Array4<f64>| a.iter().filter(|&&v| v > 0.0).count() as f64;
    let (p, f) = (support(&plain.inputs.pas), support(&flipped.inputs.pas));
    assert!((p - f).abs() / p < 0.05, "{p} vs {f}");
}

#[test]
fn pas_cache_is_used_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cache_dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 8, 6);
    let ds = load_dataset(dir.path(), Split::Train).unwrap();
    let refs: Vec<_> = ds.samples.iter().take(3).collect();
    let cfg = AssembleConfig::default();
    let cache = PasCache::open(cache_dir.path(), &PasConfig::default()).unwrap();
    let miss = assemble_batch::<f32>(&refs, &cfg, Augment::None, Some(&cache)).unwrap();
    assert!(cache.path_for(&refs[0].sample_id).exists());
    let hit = assemble_batch::<f32>(&refs, &cfg, Augment::None, Some(&cache)).unwrap();
    assert_eq!(miss.inputs.pas, hit.inputs.pas);
}
