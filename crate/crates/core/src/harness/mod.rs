//! Experiment orchestration: run configs, training, evaluation, ablation
//! sweeps, and static result reports.

pub mod ablate;
pub mod config;
pub mod evaluate;
pub mod report;
pub mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use ablate::{ablate, AblationGrid, AblationRow, ABLATION_FILE};
pub use config::{Precision, RunConfig};
pub use evaluate::{evaluate_checkpoint, evaluate_oracle, EvalOutputs, Prediction, Predictor, RuleOracle};
pub use report::{render_report, ReportOptions};
pub use train::{train, train_with, EpochRecord, TrainOptions, TrainSummary};

/// Progress counters carried in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub step: u64,
    pub best_val_map: Option<f64>,
}

/// Harness metadata stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub config: RunConfig,
    pub config_hash: String,
    /// Dataset root the run trained on.
    pub data_dir: PathBuf,
    pub state: TrainState,
}
