//! Optimizer, checkpoints, training loops, evaluation, ablation harness and
//! heatmap export.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod heatmap;
pub mod optim;
pub mod train;

pub use ablation::{run_ablation, AblationAxis, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::{EvalSplit, PriorConfig, RunConfig, TrainConfig};
pub use heatmap::export_heatmaps;
pub use optim::{adamw_update, AdamW, AdamWParams};
pub use train::{evaluate, pretrain_prior, train_segmentation, EvalReport, LoadedModel, PriorBundle, PriorReport, SegReport, TrainedSeg};

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "PRIOR_ATTUNET_THREADS";

/// Thread cap requested through [`THREADS_ENV`]; `None` when unset. Every
/// kernel in this crate runs on the calling thread, so any cap of at least
/// one is already satisfied.
pub fn thread_cap() -> crate::Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(crate::Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}
