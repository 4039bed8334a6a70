//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{s, Array2, Array3, Array4, Axis};
use peri::data::{assemble_batch, load_dataset, make_synthetic, AssembleConfig, Augment, Split, SyntheticOptions};
use peri::harness::{AblationGrid, RunConfig};
use peri::imageops::{bbox_window, load_rgb};
use peri::landmarks::load_landmark_file;
use peri::losses::{batch_weights, loss_cat_batch, loss_cont_batch};
use peri::metrics::average_precision;
use peri::model::{build_model, BackboneDescriptor, ContInBlock, ContInConfig, ModelConfig, ModelInputs, ModelVariant};
use peri::nn::{Mode, Parameterized};
use peri::pasgen::{binarize, gaussian_field, make_pas_detailed, GaussianField, PasConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn peri_cmd(args: &[&str], envs: &[(&str, &str)]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_peri"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().map_err(|e| format!("cannot run peri: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "peri {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Reference config from `configs/` with its outputs redirected.
fn config_from(name: &str, output_dir: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(&workspace_root().join("configs").join(name)).map_err(|e| e.to_string())?;
    cfg.paths.output_dir = output_dir.to_path_buf();
    Ok(cfg)
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<(), String> {
    fs::write(path, cfg.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize, String> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| format!("missing column {name}"))
}

// Mask oracle -----------------------------------------------------------------

fn brute_mask(points: &[(f64, f64)], h: usize, w: usize, rho: f64) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |(row, col)| {
        points.iter().any(|&(px, py)| {
            let (dx, dy) = (col as f64 - px, row as f64 - py);
            (dx * dx + dy * dy).sqrt() <= rho
        }) as u8
    })
}

fn mask_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..1000 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let n = rng.random_range(0..=10);
        let integer = rng.random_bool(0.5);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                if integer {
                    (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64)
                } else {
                    (rng.random_range(-3.0..w as f64 + 3.0), rng.random_range(-3.0..h as f64 + 3.0))
                }
            })
            .collect();
        let rho = if rng.random_bool(0.3) {
            rng.random_range(1..6) as f64
        } else {
            rng.random_range(0.1..8.0)
        };
        let got = binarize(&points, h, w, rho).map_err(|e| e.to_string())?;
        ensure!(
            got.mask == brute_mask(&points, h, w, rho),
            "case {case}: {h}x{w}, rho {rho}, points {points:?}"
        );
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(10), "took {t:?}");
    Ok(format!("1000 cases bit-exact in {:.2?}", t))
}

// Gaussian peak ---------------------------------------------------------------

fn gaussian_peak() -> Outcome {
    let want = 1.0 / (3.0 * (2.0 * std::f64::consts::PI).sqrt());
    let mut worst = 0.0f64;
    for &(x, y) in &[(0usize, 0usize), (5, 7), (31, 12), (16, 16)] {
        let f = gaussian_field(&[(x as f64, y as f64)], 32, 32, 3.0).map_err(|e| e.to_string())?;
        worst = worst.max((f.values[[y, x]] - want).abs());
    }
    // Through the full pipeline: a landmark at k/(n-1) lands exactly on cell k.
    let mut set = peri::landmarks::LandmarkSet::empty(peri::landmarks::LandmarkLayout::holistic(), 40, 60);
    set.body[0] = peri::landmarks::Landmark::at(37.0 / 127.0, 90.0 / 127.0);
    let crop = Array3::from_elem((3, 60, 40), 0.5f64);
    let art = make_pas_detailed(crop.view(), &set, &PasConfig::default(), "peak").map_err(|e| e.to_string())?;
    worst = worst.max((art.field.values[[90, 37]] - want).abs());
    worst = worst.max((GaussianField::<f64>::peak(3.0) - want).abs());
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("max deviation {worst:.1e} from {want:.12}"))
}

// PAS support containment -----------------------------------------------------

fn pas_containment(work: &Path) -> Outcome {
    let root = work.join("containment");
    make_synthetic(
        &root,
        SyntheticOptions {
            n: 100,
            seed: 11,
            image_size: 128,
        },
    )
    .map_err(|e| e.to_string())?;
    let cfg = PasConfig::default();
    let acfg = AssembleConfig::default();
    let mut checked = 0;
    let mut support = 0usize;
    for split in Split::ALL {
        let ds = load_dataset(&root, split).map_err(|e| e.to_string())?;
        for sample in &ds.samples {
            let img: Array3<f64> = load_rgb(&sample.image_path).map_err(|e| e.to_string())?;
            let (_, h, w) = img.dim();
            let (x0, y0, x1, y1) = bbox_window(sample.bbox, h, w);
            let crop = img.slice(s![.., y0..y1, x0..x1]);
            let landmarks = match &sample.landmark_path {
                Some(p) => load_landmark_file(p).map_err(|e| e.to_string())?,
                None => return Err(format!("{}: no landmark file", sample.sample_id)),
            };
            let art = make_pas_detailed(crop, &landmarks, &cfg, &sample.sample_id).map_err(|e| e.to_string())?;
            for ((c, r, k), &v) in art.pas.pixels.indexed_iter() {
                if v != 0.0 {
                    ensure!(art.mask.mask[[r, k]] == 1, "{}: pixel ({r},{k}) outside support", sample.sample_id);
                    ensure!(v == art.resized_crop[[c, r, k]], "{}: pixel ({c},{r},{k}) altered", sample.sample_id);
                    support += 1;
                } else if art.mask.mask[[r, k]] == 1 {
                    ensure!(art.resized_crop[[c, r, k]] == 0.0, "{}: supported pixel dropped", sample.sample_id);
                }
            }
            // The training pipeline must produce the same PAS.
            let batch = assemble_batch::<f64>(&[sample], &acfg, Augment::None, None).map_err(|e| e.to_string())?;
            ensure!(
                batch.inputs.pas.index_axis(Axis(0), 0) == art.pas.pixels,
                "{}: batch PAS differs from the direct construction",
                sample.sample_id
            );
            checked += 1;
        }
    }
    ensure!(checked == 100, "only {checked} samples checked");
    Ok(format!("{checked} samples, {support} supported pixels, all exact"))
}

// Cont-In shape preservation --------------------------------------------------

fn toy_model_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        backbone: BackboneDescriptor {
            arch: "resnet18".into(),
            base_width: 8,
        },
        ..ModelConfig::default()
    }
}

fn random4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize), lo: f64, hi: f64) -> Array4<f64> {
    Array4::from_shape_simple_fn(dim, || rng.random_range(lo..hi))
}

fn cont_in_shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let desc = toy_model_config(ModelVariant::ContInBody).backbone;
    let sizes = BackboneDescriptor::stage_sizes(128);
    for (stage, (&c, &n)) in desc.stage_widths().iter().zip(&sizes).enumerate() {
        let mut block = ContInBlock::<f64>::new(c, 3, &ContInConfig::default(), &mut rng);
        let x = random4(&mut rng, (2, c, n, n), -1.0, 1.0);
        let pas = random4(&mut rng, (2, 3, 128, 128), 0.0, 1.0);
        for mode in [Mode::Train, Mode::Eval] {
            let y = block.forward(&x, &pas, mode).map_err(|e| e.to_string())?;
            ensure!(y.dim() == x.dim(), "stage {}: {:?} -> {:?}", stage + 1, x.dim(), y.dim());
        }
    }
    let cfg = toy_model_config(ModelVariant::Baseline);
    let mut model = build_model::<f64>(&cfg, 5).map_err(|e| e.to_string())?;
    let base = ModelInputs {
        full_image: random4(&mut rng, (2, 3, 224, 224), 0.0, 1.0),
        body_crop: random4(&mut rng, (2, 3, 128, 128), 0.0, 1.0),
        pas: Array4::zeros((2, 3, 128, 128)),
    };
    let reference = model.forward(&base, Mode::Eval).map_err(|e| e.to_string())?;
    for _ in 0..3 {
        let mut other = base.clone();
        other.pas = random4(&mut rng, (2, 3, 128, 128), 0.0, 1.0);
        let out = model.forward(&other, Mode::Eval).map_err(|e| e.to_string())?;
        ensure!(out == reference, "baseline output changed with the PAS input");
    }
    Ok(format!(
        "stages 1-4 at widths {:?} preserve dims; baseline bit-invariant over 3 PAS inputs",
        desc.stage_widths()
    ))
}

// Gradient checks -------------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

fn projected(block: &mut ContInBlock<f64>, x: &Array4<f64>, pas: &Array4<f64>, r: &Array4<f64>) -> f64 {
    let y = block.forward(x, pas, Mode::Train).expect("forward");
    (&y * r).sum()
}

fn block_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block = ContInBlock::<f64>::new(4, 3, &ContInConfig::default(), &mut rng);
    let x = random4(&mut rng, (2, 4, 8, 8), -1.0, 1.0);
    let pas = random4(&mut rng, (2, 3, 32, 32), 0.0, 1.0);
    let r = random4(&mut rng, (2, 4, 8, 8), -1.0, 1.0);
    block.zero_grad();
    block.forward(&x, &pas, Mode::Train).expect("forward");
    let (dx, dpas) = block.backward(&r, true);
    let dpas = dpas.expect("pas grad");
    let grads: Vec<(String, Vec<f64>)> = block
        .named_params()
        .into_iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n, p.grad.iter().copied().collect()))
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let fd_input = |block: &mut ContInBlock<f64>, which: u8, i: usize| {
        let (mut xp, mut xm, mut pp, mut pm) = (x.clone(), x.clone(), pas.clone(), pas.clone());
        if which == 0 {
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
        } else {
            pp.as_slice_mut().unwrap()[i] += h;
            pm.as_slice_mut().unwrap()[i] -= h;
        }
        (projected(block, &xp, &pp, &r) - projected(block, &xm, &pm, &r)) / (2.0 * h)
    };
    for i in 0..x.len() {
        worst = worst.max(rel_err(dx.as_slice().unwrap()[i], fd_input(&mut block, 0, i)));
    }
    for i in (0..pas.len()).step_by(5) {
        worst = worst.max(rel_err(dpas.as_slice().unwrap()[i], fd_input(&mut block, 1, i)));
    }
    for (name, grad) in &grads {
        for (i, &g) in grad.iter().enumerate() {
            let bump = |block: &mut ContInBlock<f64>, delta: f64| {
                let mut params = block.named_params_mut();
                let (_, p) = params.iter_mut().find(|(n, _)| n == name).expect("param");
                p.value.as_slice_mut().unwrap()[i] += delta;
            };
            bump(&mut block, h);
            let up = projected(&mut block, &x, &pas, &r);
            bump(&mut block, -2.0 * h);
            let down = projected(&mut block, &x, &pas, &r);
            bump(&mut block, h);
            worst = worst.max(rel_err(g, (up - down) / (2.0 * h)));
        }
    }
    worst
}

fn loss_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Both losses are quadratic or piecewise linear here, so a wide step has no truncation error.
    let h = 1e-3;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, k) = (rng.random_range(1..8), 26);
        let target = Array2::from_shape_simple_fn((n, k), || if rng.random_bool(0.2) { 1.0 } else { 0.0 });
        let pred = Array2::from_shape_simple_fn((n, k), || rng.random_range(-1.0..2.0));
        let w = batch_weights(target.view(), 1.2).expect("weights");
        let (_, g) = loss_cat_batch(pred.view(), target.view(), &w).expect("loss");
        for idx in ndarray::indices((n, k)) {
            let (mut up, mut down) = (pred.clone(), pred.clone());
            up[idx] += h;
            down[idx] -= h;
            let fd = (loss_cat_batch(up.view(), target.view(), &w).unwrap().0
                - loss_cat_batch(down.view(), target.view(), &w).unwrap().0)
                / (2.0 * h);
            worst = worst.max(rel_err(g[idx], fd));
        }
        let vt = Array2::from_shape_simple_fn((n, 3), || rng.random_range(1.0..10.0));
        let vp = Array2::from_shape_fn((n, 3), |(r, c)| {
            vt[[r, c]] + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.1..4.0)
        });
        let (_, gv) = loss_cont_batch(vp.view(), vt.view()).expect("loss");
        for idx in ndarray::indices((n, 3)) {
            let (mut up, mut down) = (vp.clone(), vp.clone());
            up[idx] += h;
            down[idx] -= h;
            let fd = (loss_cont_batch(up.view(), vt.view()).unwrap().0 - loss_cont_batch(down.view(), vt.view()).unwrap().0)
                / (2.0 * h);
            worst = worst.max(rel_err(gv[idx], fd));
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let block = block_gradient_error();
    let losses = loss_gradient_error();
    let t = start.elapsed();
    ensure!(block <= 1e-4, "Cont-In block relative error {block:e}");
    ensure!(losses <= 1e-6, "loss relative error {losses:e}");
    ensure!(t < Duration::from_secs(60), "took {t:?}");
    Ok(format!("block {block:.1e}, losses {losses:.1e}, {:.2?}", t))
}

// Loss-weight oracle ----------------------------------------------------------

fn loss_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = 1.2;
    let mut absent = 0;
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (n, k) = (rng.random_range(1..=64), 26);
        let rate = rng.random_range(0.0..0.6);
        let dropped: Vec<bool> = (0..k).map(|_| rng.random_bool(0.2)).collect();
        let labels = Array2::from_shape_fn((n, k), |(_, j)| {
            if !dropped[j] && rng.random_bool(rate) {
                1.0
            } else {
                0.0
            }
        });
        let w = batch_weights(labels.view(), c).map_err(|e| e.to_string())?;
        for j in 0..k {
            let mut count = 0;
            for i in 0..n {
                if labels[[i, j]] > 0.5 {
                    count += 1;
                }
            }
            let p = count as f64 / n as f64;
            worst = worst.max((w.w[j] - 1.0 / (p + c).ln()).abs());
            if count == 0 {
                absent += 1;
                ensure!((w.w[j] - 1.0 / c.ln()).abs() <= 1e-12, "absent category weight {}", w.w[j]);
            }
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("200 batches, max deviation {worst:.1e}, {absent} absent categories at 1/ln(c)"))
}

// AP oracle -------------------------------------------------------------------

fn brute_ap(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let n = scores.len();
    let rank = |i: usize| 1 + (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
    let positives: Vec<usize> = (0..n).filter(|&i| truth[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let r = rank(i);
            positives.iter().filter(|&&j| rank(j) <= r).count() as f64 / r as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

fn ap_oracle() -> Outcome {
    let hand = average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, true, false, true])
        .map_err(|e| e.to_string())?
        .value();
    ensure!(hand.is_some_and(|v: f64| (v - 0.5).abs() <= 1e-12), "hand case gave {hand:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cases = 0;
    let mut worst = 0.0f64;
    for n in 1..=8usize {
        for pattern in 0u32..(1 << n) {
            let truth: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
            for draw in 0..50 {
                let scores: Vec<f64> = if draw % 2 == 0 {
                    (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect()
                } else {
                    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
                };
                let got = average_precision(&scores, &truth).map_err(|e| e.to_string())?.value();
                match (got, brute_ap(&scores, &truth)) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    (a, b) => return Err(format!("{scores:?}/{truth:?}: {a:?} vs {b:?}")),
                }
                cases += 1;
            }
        }
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    Ok(format!("{cases} configurations, max deviation {worst:.1e}; hand case 0.5"))
}

// Determinism -----------------------------------------------------------------

fn determinism(work: &Path) -> Outcome {
    let out = work.join("determinism");
    let mut cfg = config_from("smoke.toml", &out)?;
    cfg.synthetic.n = 32;
    cfg.optimizer.epochs = 3;
    cfg.deterministic = false;
    let cfg_path = work.join("determinism.toml");
    write_config(&cfg, &cfg_path)?;
    let env = [("PERI_DETERMINISTIC", "1")];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&out);
        peri_cmd(&["train", "--config", path_str(&cfg_path)], &env)?;
        let history = fs::read(out.join("history.csv")).map_err(|e| e.to_string())?;
        let ckpt = fs::read(out.join("last.ckpt")).map_err(|e| e.to_string())?;
        runs.push((history, ckpt));
    }
    let (header, rows) = read_csv(&out.join("history.csv"))?;
    ensure!(rows.len() == 3, "expected 3 epochs, history has {}", rows.len());
    ensure!(runs[0].0 == runs[1].0, "metrics histories differ");
    ensure!(runs[0].1 == runs[1].1, "final checkpoints differ");
    let map = column(&header, "val_map")?;
    Ok(format!(
        "3 epochs on n=32 twice: identical histories (final val mAP {}) and checkpoints",
        rows[2][map]
    ))
}

// Learnability ----------------------------------------------------------------

fn learnability(work: &Path) -> Outcome {
    let out = work.join("learnability");
    let cfg = config_from("learnability.toml", &out)?;
    ensure!(cfg.synthetic.n == 64, "config uses n={}", cfg.synthetic.n);
    ensure!(cfg.model.variant == ModelVariant::ContInBody, "config trains {}", cfg.model.variant);
    ensure!(cfg.optimizer.epochs <= 50, "config trains {} epochs", cfg.optimizer.epochs);
    let cfg_path = work.join("learnability.toml");
    write_config(&cfg, &cfg_path)?;
    let start = Instant::now();
    peri_cmd(&["train", "--config", path_str(&cfg_path)], &[])?;
    let t = start.elapsed();
    let (header, rows) = read_csv(&out.join("history.csv"))?;
    let (map_col, err_col) = (column(&header, "val_map")?, column(&header, "val_mean_err")?);
    let parse = |row: &Vec<String>, c: usize| row[c].parse::<f64>().unwrap_or(f64::NAN);
    let first = rows
        .iter()
        .position(|r| parse(r, map_col) >= 0.9 && parse(r, err_col) <= 1.0)
        .map(|i| i + 1);
    let last = rows.last().ok_or("empty history")?;
    let (map, err) = (parse(last, map_col), parse(last, err_col));
    ensure!(rows.len() <= 50, "{} epochs", rows.len());
    ensure!(
        map >= 0.9 && err <= 1.0,
        "after {} epochs val mAP {map:.4}, VAD mean L1 {err:.4}",
        rows.len()
    );
    ensure!(t < Duration::from_secs(15 * 60), "took {t:?}");
    Ok(format!(
        "epoch {}: val mAP {map:.4}, VAD mean L1 {err:.4} (both first met at epoch {}), {:.0?}",
        rows.len(),
        first.unwrap_or(0),
        t
    ))
}

// Ablation --------------------------------------------------------------------

fn ablation(work: &Path) -> Outcome {
    let out = work.join("ablation");
    let mut grid = AblationGrid::load(&workspace_root().join("configs/ablation.toml")).map_err(|e| e.to_string())?;
    grid.base.paths.output_dir = out.clone();
    let path = work.join("ablation.toml");
    fs::write(&path, grid.to_toml().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    peri_cmd(&["ablate", "--grid", path_str(&path)], &[])?;
    let (header, rows) = read_csv(&out.join("ablation.csv"))?;
    let want = ["baseline", "early_fusion", "late_fusion", "cont_in_body", "cont_in_both"];
    ensure!(rows.len() == 5, "{} rows", rows.len());
    let variant = column(&header, "variant")?;
    let status = column(&header, "status")?;
    let metrics: Vec<usize> = ["mAP", "err_v", "err_a", "err_d", "mean_err"]
        .iter()
        .map(|m| column(&header, m))
        .collect::<Result<_, _>>()?;
    let mut summary = Vec::new();
    for (row, name) in rows.iter().zip(want) {
        ensure!(row[variant] == name, "row order: got {}, expected {name}", row[variant]);
        ensure!(row[status] == "ok", "{name}: status {}", row[status]);
        for &m in &metrics {
            let v: f64 = row[m].parse().map_err(|_| format!("{name}: {} = {:?}", header[m], row[m]))?;
            ensure!(v.is_finite(), "{name}: {} not finite", header[m]);
        }
        summary.push(format!("{name} {:.3}", row[metrics[0]].parse::<f64>().unwrap()));
    }
    Ok(format!("5 rows x {} metric columns; mAP: {}", metrics.len(), summary.join(", ")))
}

// Report ----------------------------------------------------------------------

struct PredRow {
    scores: Vec<f64>,
    truth: Vec<String>,
}

fn read_prediction_rows(path: &Path) -> Result<(Vec<String>, HashMap<String, PredRow>), String> {
    let (header, rows) = read_csv(path)?;
    let cats: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("score_").map(String::from))
        .collect();
    let score_cols: Vec<usize> = cats
        .iter()
        .map(|c| column(&header, &format!("score_{c}")))
        .collect::<Result<_, _>>()?;
    let truth_col = column(&header, "true_categories")?;
    let mut out = HashMap::new();
    for r in rows {
        let scores = score_cols.iter().map(|&c| r[c].parse().unwrap_or(f64::NAN)).collect();
        let truth = r[truth_col].split(';').filter(|s| !s.is_empty()).map(String::from).collect();
        out.insert(r[0].clone(), PredRow { scores, truth });
    }
    Ok((cats, out))
}

fn attr(tag: &str, name: &str) -> Option<String> {
    let key = format!("{name}=\"");
    let start = tag.find(&key)? + key.len();
    let end = tag[start..].find('"')? + start;
    Some(tag[start..end].to_string())
}

fn tags<'a>(svg: &'a str, class: &str) -> Vec<&'a str> {
    let needle = format!("class=\"{class}\"");
    svg.lines().filter(|l| l.contains(&needle)).collect()
}

fn report(work: &Path) -> Outcome {
    let run = work.join("learnability");
    let ckpt = run.join("best.ckpt");
    ensure!(ckpt.exists(), "no trained checkpoint (learnability run missing)");
    let eval_dir = work.join("report_eval");
    peri_cmd(
        &[
            "evaluate",
            "--checkpoint",
            path_str(&ckpt),
            "--split",
            "test",
            "--out",
            path_str(&eval_dir),
        ],
        &[],
    )?;
    let oracle_dir = work.join("report_oracle");
    peri_cmd(
        &[
            "evaluate",
            "--oracle",
            "--data-dir",
            path_str(&run.join("synthetic")),
            "--split",
            "test",
            "--out",
            path_str(&oracle_dir),
        ],
        &[],
    )?;

    // A copy of the predictions with out-of-range VAD exercises axis clamping.
    let preds = eval_dir.join("predictions.csv");
    let wild_dir = work.join("report_wild");
    fs::create_dir_all(&wild_dir).map_err(|e| e.to_string())?;
    let wild = wild_dir.join("predictions.csv");
    let (header, mut rows) = read_csv(&preds)?;
    let (pv, pa) = (column(&header, "pred_v")?, column(&header, "pred_a")?);
    rows[0][pv] = "14.5".into();
    rows[0][pa] = "-3".into();
    let mut w = csv::Writer::from_path(&wild).map_err(|e| e.to_string())?;
    w.write_record(&header).map_err(|e| e.to_string())?;
    for r in &rows {
        w.write_record(r).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())?;
    fs::copy(eval_dir.join("predictions.meta.json"), wild_dir.join("predictions.meta.json"))
        .map_err(|e| e.to_string())?;

    let report_dir = work.join("report");
    peri_cmd(
        &[
            "report",
            "--predictions",
            path_str(&wild),
            "--compare",
            path_str(&oracle_dir.join("predictions.csv")),
            "--k",
            "3",
            "--out",
            path_str(&report_dir),
        ],
        &[],
    )?;

    let (_, pred_rows) = read_prediction_rows(&wild)?;
    let (cats, _) = read_prediction_rows(&preds)?;
    let (rheader, rrows) = read_csv(&report_dir.join("report.csv"))?;
    ensure!(!rrows.is_empty(), "empty report");
    ensure!(column(&rheader, "cat_4").is_err(), "report lists more than 3 categories");
    let mut flags = [0usize; 2];
    for row in &rrows {
        let id = &row[0];
        let p = pred_rows.get(id).ok_or_else(|| format!("{id} not in predictions"))?;
        let mut order: Vec<usize> = (0..cats.len()).collect();
        order.sort_by(|&a, &b| p.scores[b].total_cmp(&p.scores[a]));
        let svg = fs::read_to_string(report_dir.join(format!("{id}.svg"))).map_err(|e| e.to_string())?;
        let listed = tags(&svg, "top-category");
        ensure!(listed.len() == 3, "{id}: {} categories drawn", listed.len());
        for i in 0..3 {
            let name = &row[column(&rheader, &format!("cat_{}", i + 1))?];
            let correct = &row[column(&rheader, &format!("correct_{}", i + 1))?];
            ensure!(*name == cats[order[i]], "{id}: rank {} is {name}, expected {}", i + 1, cats[order[i]]);
            let truly = p.truth.iter().any(|t| t == name);
            ensure!(*correct == (truly as u8).to_string(), "{id}: {name} flagged {correct}");
            ensure!(
                attr(listed[i], "data-correct").as_deref() == Some(if truly { "true" } else { "false" }),
                "{id}: svg flag for {name}"
            );
            flags[truly as usize] += 1;
        }
        let axis = tags(&svg, "vad-axis");
        ensure!(axis.len() == 1, "{id}: {} axes", axis.len());
        ensure!(
            attr(axis[0], "data-min").as_deref() == Some("1") && attr(axis[0], "data-max").as_deref() == Some("10"),
            "{id}: axis is not [1,10]"
        );
        let bars = tags(&svg, "vad-bar");
        ensure!(bars.len() == 9, "{id}: {} bars (expected model, oracle and truth per dimension)", bars.len());
        for b in &bars {
            let v: f64 = attr(b, "data-value").and_then(|v| v.parse().ok()).ok_or("bar without value")?;
            ensure!((1.0..=10.0).contains(&v), "{id}: bar value {v} off the axis");
        }
    }
    let first = &rrows[0];
    ensure!(
        first[column(&rheader, "model_v")?] == "10" && first[column(&rheader, "model_a")?] == "1",
        "out-of-range VAD not clamped to the axis"
    );
    Ok(format!(
        "{} examples x 3 categories ({} correct, {} incorrect), bars on [1,10]",
        rrows.len(),
        flags[1],
        flags[0]
    ))
}

// Runner ----------------------------------------------------------------------

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("mask oracle equivalence", Box::new(mask_oracle)),
        ("gaussian peak", Box::new(gaussian_peak)),
        ("PAS support containment", Box::new(|| pas_containment(w))),
        ("cont-in shape preservation", Box::new(cont_in_shapes)),
        ("gradient checks", Box::new(gradient_checks)),
        ("loss-weight oracle", Box::new(loss_weights)),
        ("AP oracle", Box::new(ap_oracle)),
        ("determinism", Box::new(|| determinism(w))),
        ("desk-scale learnability", Box::new(|| learnability(w))),
        ("ablation harness fidelity", Box::new(|| ablation(w))),
        ("report fidelity", Box::new(|| report(w))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
