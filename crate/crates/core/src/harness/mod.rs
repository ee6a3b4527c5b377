//! Training orchestration, ablation runs and reporting.

mod ablation;
mod config;
pub mod plot;
mod train;

pub use ablation::{
    load_matrix, preset, run_ablation, AblationCell, AblationReport, CellRun, CellSummary, PRESETS,
};
pub use config::{Method, RunConfig, StatsOrder, REFERENCE_EPOCHS, REFERENCE_IMAGE_SIZE};
pub use train::{
    epoch_order, evaluate_checkpoint, foreground_classes, read_metrics, read_run_log, run_training,
    run_training_with, step_gradients, step_key, train_step, EpochRecord, RunLog, RunOutcome,
    StepLosses, StepOutput, TrainOptions, CHECKPOINT_DIR, METRICS_FILE, RESUME_DIR, RUN_LOG_FILE,
};
