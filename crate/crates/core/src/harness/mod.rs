//! Run configuration, training, evaluation, gradient checks and ablations
//! behind the `dpa` command line.

mod ablation;
mod checkpoint;
mod config;
mod gradsuite;
mod optim;
mod run_eval;
mod schedule;
mod train;

pub use ablation::{run_ablation, variant_config, write_ablation_csv, AblationRow, ABLATION_FILE, ABLATION_METHODS};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{EvalConfig, RunConfig, CONFIG_KEYS};
pub use gradsuite::{run_suite, suite, CheckResult, SuiteItem, FULL_MODEL_TOLERANCE, ITEM_TOLERANCE};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use run_eval::{chance_map, evaluate_model, run_eval, EvalOutcome, SplitLabels, METRICS_FILE, RANKS_FILE};
pub use schedule::{Decay, Schedule};
pub use train::{
    backbone_for, run_train, stream_seed, train, write_train_artifacts, EpochRecord, TrainLog, TrainOutcome,
    CHECKPOINT_FILE, CONFIG_FILE, TIMING_FILE, TRAIN_LOG_FILE,
};
