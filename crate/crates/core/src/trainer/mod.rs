//! Contrastive training: InfoNCE over in-batch negatives, full-batch and
//! gradient-cached steps, AdamW and a warmup schedule.

mod adamw;
mod info_nce;
mod schedule;
mod step;
mod train;

pub use adamw::{adamw_update, AdamWConfig, AdamWState};
pub use info_nce::{info_nce, InfoNceOutput};
pub use schedule::warmup_lr;
pub use step::{full_batch_step, grad_cache_step, Batch, CachedEmbeddings, Pair, StepOutput};
pub use train::{train, train_step, PairSource, RunDir, StepLog, TrainConfig, TrainOutcome};
