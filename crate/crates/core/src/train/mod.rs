//! Run configuration, AdamW, the unified and two-stage training loops,
//! checkpoint scoring, the scan benchmark and model descriptions.

mod bench;
mod config;
mod dataset;
mod describe;
mod optim;
mod trainer;

pub use bench::{bench_scan, loglog_slope, BenchReport, BenchRow, BENCH_LENGTHS};
pub use config::{DataConfig, OptimConfig, RunConfig, ScheduleConfig, StagePlan, ENV_PREFIX};
pub use dataset::Dataset;
pub use describe::{complexity, describe_checkpoint, describe_config, describe_store};
pub use optim::AdamW;
pub use trainer::{
    evaluate_checkpoint, predict_events, score, score_events, stages, train, Checkpoint, EpochLog, TrainReport,
    Trainer, CHECKPOINT_FILE,
};
