//! `peri` command-line entry point.
//!
//! Failures print one JSON line `{"error": <kind>, "message": <text>}` to
//! stderr and exit with status 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use peri::data::{make_synthetic, Split, SyntheticOptions};
use peri::harness::{
    ablate, evaluate_checkpoint, evaluate_oracle, render_report, train_with, AblationGrid, EvalOutputs, ReportOptions,
    RunConfig, TrainOptions,
};
use peri::Error;

#[derive(Debug, Parser)]
#[command(name = "peri", version, about = "Part-aware context emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint (or the planted-rule oracle) on a split.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Dataset root; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate the rule oracle on a synthetic dataset instead of a model.
        #[arg(long, requires = "data_dir", conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Train and evaluate every variant and sigma of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        image_size: u32,
    },
    /// Render per-sample SVG figures and a summary CSV from predictions.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        /// Further predictions files drawn as extra VAD series.
        #[arg(long)]
        compare: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn print_eval(out: &EvalOutputs) {
    println!(
        "mAP {:.4}  err_V {:.4}  err_A {:.4}  err_D {:.4}  mean {:.4}",
        out.map.map, out.vad.valence, out.vad.arousal, out.vad.dominance, out.vad.mean
    );
    println!("metrics: {}", out.metrics_path.display());
    println!("predictions: {}", out.predictions_path.display());
}

fn run(cli: Cli) -> peri::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let summary = train_with(&cfg, &TrainOptions { resume })?;
            if let Some(last) = summary.history.last() {
                println!(
                    "epoch {}  loss {:.4}  val mAP {:.4}  val mean err {:.4}",
                    last.epoch, last.loss_total, last.val_map, last.val_mean_err
                );
            }
            println!("history: {}", summary.history_path().display());
            println!("last checkpoint: {}", summary.last_checkpoint.display());
            if let Some(best) = &summary.best_checkpoint {
                println!("best checkpoint: {}", best.display());
            }
        }
        Command::Evaluate {
            checkpoint,
            split,
            data_dir,
            out,
            oracle,
        } => {
            let outputs = if oracle {
                let data_dir = data_dir.expect("clap enforces --data-dir with --oracle");
                let out = out.unwrap_or_else(|| data_dir.join("oracle_eval").join(split.name()));
                evaluate_oracle(&data_dir, split, &out)?
            } else {
                let ckpt = checkpoint.expect("clap enforces --checkpoint without --oracle");
                evaluate_checkpoint(&ckpt, split, data_dir.as_deref(), out.as_deref())?
            };
            print_eval(&outputs);
        }
        Command::Ablate { grid } => {
            let grid = AblationGrid::load(&grid)?;
            let rows = ablate(&grid)?;
            for r in &rows {
                let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
                println!(
                    "{:<14} sigma {:<5} {:<6} mAP {}  mean err {}",
                    r.variant,
                    r.sigma,
                    r.status,
                    fmt(r.map),
                    fmt(r.mean_err)
                );
            }
            println!(
                "table: {}",
                grid.base.paths.output_dir.join(peri::harness::ABLATION_FILE).display()
            );
        }
        Command::Synth {
            n,
            seed,
            out,
            image_size,
        } => {
            make_synthetic(&out, SyntheticOptions { n, seed, image_size })?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Report {
            predictions,
            compare,
            k,
            out,
            data_dir,
        } => {
            let report = render_report(&ReportOptions {
                predictions,
                compare,
                k,
                out_dir: out,
                data_dir,
            })?;
            println!(
                "rendered {} samples ({} skipped) to {}",
                report.entries.len(),
                report.skipped.len(),
                report.out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::FAILURE
        }
    }
}

fn report_error(e: &Error) {
    let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{line}");
}
