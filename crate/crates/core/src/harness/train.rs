//! Training loop with per-epoch checkpoints, best-by-validation-mAP
//! selection, resume, and a metrics history file.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml        echo of the run config
//! history.csv        one row per epoch
//! last.ckpt          written after every epoch
//! best.ckpt          highest validation mAP so far
//! nonfinite_batch.json   only when training aborted on a non-finite loss
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{assemble_batch, load_dataset, make_synthetic, AssembleConfig, Augment, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::{batch_weights, loss_cat_batch, loss_cont_batch, loss_total};
use crate::model::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::model::{build_model, PeriModel};
use crate::nn::optim::Optimizer;
use crate::nn::{Mode, Parameterized};
use crate::pasgen::PasCache;
use crate::scalar::Scalar;

use super::config::{Precision, RunConfig};
use super::evaluate::{checkpoint_run_info, score_predictions, ModelPredictor, Predictor};
use super::{RunInfo, TrainState};

pub const HISTORY_FILE: &str = "history.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

/// One row of `history.csv`. Validation columns are NaN when the
/// validation split is empty or has no positive labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss_cat: f64,
    pub loss_cont: f64,
    pub loss_total: f64,
    pub val_map: f64,
    pub val_err_v: f64,
    pub val_err_a: f64,
    pub val_err_d: f64,
    pub val_mean_err: f64,
    pub best: bool,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub config_hash: String,
    pub history: Vec<EpochRecord>,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
}

impl TrainSummary {
    pub fn history_path(&self) -> PathBuf {
        self.output_dir.join(HISTORY_FILE)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint (normally `<output_dir>/last.ckpt`).
    pub resume: Option<PathBuf>,
}

pub fn write_history(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// The dataset root for a run, generating the synthetic set when no data
/// directory is configured.
pub fn resolve_data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    match &cfg.paths.data_dir {
        Some(dir) => Ok(dir.clone()),
        None => {
            let dir = cfg.paths.output_dir.join("synthetic");
            make_synthetic(&dir, cfg.synthetic.options())?;
            Ok(dir)
        }
    }
}

pub fn pas_cache_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths
        .pas_cache_dir
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join("pas_cache"))
}

pub fn assemble_config(cfg: &RunConfig) -> AssembleConfig {
    AssembleConfig {
        image_size: cfg.model.image_size,
        body_size: cfg.model.body_size,
        pas: cfg.pas.clone(),
    }
}

/// Runs `f` on a single-thread pool when deterministic execution is
/// requested.
pub fn with_determinism<R: Send>(deterministic: bool, f: impl FnOnce() -> R + Send) -> Result<R> {
    if !deterministic {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build deterministic thread pool: {e}")))?;
    Ok(pool.install(f))
}

pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    train_with(cfg, &TrainOptions::default())
}

pub fn train_with(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    with_determinism(cfg.deterministic_requested(), || match cfg.precision {
        Precision::F32 => Trainer::<f32>::run(cfg, opts),
        Precision::F64 => Trainer::<f64>::run(cfg, opts),
    })?
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Trainer<'a, T> {
    cfg: &'a RunConfig,
    hash: String,
    data_dir: PathBuf,
    train: Dataset,
    val: Dataset,
    model: PeriModel<T>,
    optimizer: Optimizer<T>,
    state: TrainState,
    history: Vec<EpochRecord>,
    cache: Option<PasCache>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    fn run(cfg: &'a RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
        let out = &cfg.paths.output_dir;
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let data_dir = resolve_data_dir(cfg)?;
        let train = load_dataset(&data_dir, Split::Train)?;
        let val = load_dataset(&data_dir, Split::Val)?;
        if train.samples.is_empty() {
            return Err(Error::Config(format!("{}: training split is empty", data_dir.display())));
        }
        if train.vocabulary.len() != cfg.model.num_categories {
            return Err(Error::Config(format!(
                "model.num_categories is {} but the dataset vocabulary has {} entries",
                cfg.model.num_categories,
                train.vocabulary.len()
            )));
        }
        let cache = if cfg.train.pas_cache {
            Some(PasCache::open(pas_cache_dir(cfg), &cfg.pas)?)
        } else {
            None
        };
        let hash = cfg.hash();
        let (model, optimizer, state, history) = match &opts.resume {
            None => (
                build_model::<T>(&cfg.model, cfg.seed)?,
                Optimizer::new(cfg.optimizer.settings()),
                TrainState::default(),
                Vec::new(),
            ),
            Some(path) => Self::resume(cfg, path)?,
        };
        let config_path = out.join("config.toml");
        fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
        let mut trainer = Trainer {
            cfg,
            hash,
            data_dir,
            train,
            val,
            model,
            optimizer,
            state,
            history,
            cache,
        };
        trainer.fit()
    }

    #[allow(clippy::type_complexity)]
    fn resume(
        cfg: &RunConfig,
        path: &Path,
    ) -> Result<(PeriModel<T>, Optimizer<T>, TrainState, Vec<EpochRecord>)> {
        let loaded = load_checkpoint::<T>(path)?;
        let info = checkpoint_run_info(&loaded.meta)?;
        if info.config.resume_key() != cfg.resume_key() {
            return Err(Error::Config(format!(
                "{}: checkpoint was written by a different configuration",
                path.display()
            )));
        }
        let optimizer = loaded
            .optimizer
            .ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state", path.display())))?;
        let history_path = cfg.paths.output_dir.join(HISTORY_FILE);
        let history = if history_path.exists() {
            read_history(&history_path)?
                .into_iter()
                .filter(|r| r.epoch <= info.state.epoch)
                .collect()
        } else {
            Vec::new()
        };
        log::info!("resuming from epoch {} (step {})", info.state.epoch, info.state.step);
        Ok((loaded.model, optimizer, info.state, history))
    }

    fn fit(&mut self) -> Result<TrainSummary> {
        let out = self.cfg.paths.output_dir.clone();
        let last = out.join(LAST_CHECKPOINT);
        let best = out.join(BEST_CHECKPOINT);
        for epoch in self.state.epoch + 1..=self.cfg.optimizer.epochs {
            let (loss_cat, loss_cont, loss_total) = self.train_epoch(epoch)?;
            let (val_map, val_err) = self.validate()?;
            let improved = !val_map.is_nan() && self.state.best_val_map.is_none_or(|b| val_map > b);
            self.state.epoch = epoch;
            self.state.step = self.optimizer.step;
            if improved {
                self.state.best_val_map = Some(val_map);
            }
            self.history.push(EpochRecord {
                epoch,
                step: self.optimizer.step,
                loss_cat,
                loss_cont,
                loss_total,
                val_map,
                val_err_v: val_err[0],
                val_err_a: val_err[1],
                val_err_d: val_err[2],
                val_mean_err: val_err[3],
                best: improved,
                config_hash: self.hash.clone(),
            });
            self.save(&last)?;
            if improved {
                self.save(&best)?;
            }
            write_history(&out.join(HISTORY_FILE), &self.history)?;
            log::info!(
                "epoch {epoch}: loss {loss_total:.4} (cat {loss_cat:.4}, cont {loss_cont:.4}), val mAP {val_map:.4}, val VAD err {:.3}",
                val_err[3]
            );
        }
        if !last.exists() {
            self.save(&last)?;
        }
        Ok(TrainSummary {
            output_dir: out,
            data_dir: self.data_dir.clone(),
            config_hash: self.hash.clone(),
            history: self.history.clone(),
            last_checkpoint: last,
            best_checkpoint: best.exists().then_some(best),
        })
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64, f64)> {
        let cfg = self.cfg;
        let mut order: Vec<usize> = (0..self.train.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);
        let augment = if cfg.train.augment {
            Augment::Flip {
                seed: epoch_seed(cfg.seed.wrapping_add(1), epoch),
            }
        } else {
            Augment::None
        };
        let acfg = assemble_config(cfg);
        let (lc, lv) = (T::lit(cfg.loss.lambda_cat), T::lit(cfg.loss.lambda_cont));
        let mut sums = [0.0f64; 3];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &self.train.samples[i]).collect();
            let batch = assemble_batch::<T>(&samples, &acfg, augment, self.cache.as_ref())?;
            let y = self.model.forward(&batch.inputs, Mode::Train)?;
            let weights = batch_weights(batch.categories.view(), cfg.loss.c)?;
            let (l_cat, g_cat) = loss_cat_batch(y.cat_logits.view(), batch.categories.view(), &weights)?;
            let (l_cont, g_cont) = loss_cont_batch(y.vad.view(), batch.vad.view())?;
            let total = loss_total(l_cat, l_cont, lc, lv);
            if !total.is_finite() {
                return Err(self.abort_non_finite(epoch, &batch.ids, l_cat.as_f64(), l_cont.as_f64()));
            }
            self.model.zero_grad();
            self.model.backward(&(g_cat * lc), &(g_cont * lv));
            self.optimizer.apply(self.model.named_params_mut());
            let n = samples.len() as f64;
            sums[0] += l_cat.as_f64() * n;
            sums[1] += l_cont.as_f64() * n;
            sums[2] += total.as_f64() * n;
            seen += samples.len();
        }
        let n = seen as f64;
        Ok((sums[0] / n, sums[1] / n, sums[2] / n))
    }

    fn abort_non_finite(&self, epoch: usize, ids: &[String], loss_cat: f64, loss_cont: f64) -> Error {
        let step = self.optimizer.step as usize + 1;
        let dump = serde_json::json!({
            "epoch": epoch,
            "step": step,
            "batch_ids": ids,
            "loss_cat": loss_cat.to_string(),
            "loss_cont": loss_cont.to_string(),
            "config_hash": self.hash,
        });
        let path = self.cfg.paths.output_dir.join(NONFINITE_DUMP);
        if let Err(e) = fs::write(&path, dump.to_string()) {
            log::error!("could not write {}: {e}", path.display());
        }
        Error::NonFiniteLoss {
            epoch,
            step,
            batch_ids: ids.to_vec(),
        }
    }

    /// Validation mAP and `[err_v, err_a, err_d, mean]`, NaN when undefined.
    fn validate(&mut self) -> Result<(f64, [f64; 4])> {
        let samples: Vec<&Sample> = self.val.samples.iter().collect();
        if samples.is_empty() {
            return Ok((f64::NAN, [f64::NAN; 4]));
        }
        let mut predictor = ModelPredictor {
            model: &mut self.model,
            assemble: assemble_config(self.cfg),
            batch_size: self.cfg.train.eval_batch_size,
            cache: self.cache.as_ref(),
        };
        let predictions = predictor.predict(&samples)?;
        match score_predictions(&predictions, &samples) {
            Ok((map, vad)) => Ok((map.map, [vad.valence, vad.arousal, vad.dominance, vad.mean])),
            Err(Error::Eval(msg)) => {
                log::warn!("validation metrics undefined: {msg}");
                Ok((f64::NAN, [f64::NAN; 4]))
            }
            Err(e) => Err(e),
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let info = RunInfo {
            config: self.cfg.clone(),
            config_hash: self.hash.clone(),
            data_dir: self.data_dir.clone(),
            state: self.state.clone(),
        };
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: self.cfg.model.clone(),
            pas: self.cfg.pas.clone(),
            vocabulary: self.train.vocabulary.names().to_vec(),
            run: serde_json::to_value(&info)?,
            optimizer: None,
            optimizer_step: 0,
        };
        save_checkpoint(path, &self.model, &meta, Some(&self.optimizer))
    }
}
