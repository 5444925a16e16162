//! The training loop: warmup schedule, optional clipping, AdamW, JSON-lines
//! metrics and periodic checkpoints with exact resume.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adamw::{adamw_update, AdamWConfig, AdamWState};
use super::schedule::warmup_lr;
use super::step::{full_batch_step, grad_cache_step, Batch};
use crate::checkpoint::Checkpoint;
use crate::embedder::Model;
use crate::error::{Error, Result};
use crate::numkernel::{DType, Grads, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub warmup: u64,
    /// Gradient-cache chunk; equal to `batch_size` runs the plain step.
    pub chunk_size: usize,
    pub seed: u64,
    pub precision: DType,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Clip the global gradient norm to this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl TrainConfig {
    /// Main-stage values from the configuration table.
    pub fn full_scale() -> TrainConfig {
        TrainConfig {
            temperature: 0.02,
            lr: 2e-5,
            batch_size: 1024,
            steps: 5000,
            warmup: 200,
            chunk_size: 64,
            seed: 0,
            precision: DType::F32,
            adamw: AdamWConfig::default(),
            clip_norm: None,
            checkpoint_every: None,
        }
    }

    /// Continued training on region-caption data from a checkpoint.
    pub fn full_scale_finetune() -> TrainConfig {
        TrainConfig {
            lr: 2e-6,
            steps: 1000,
            warmup: 100,
            ..TrainConfig::full_scale()
        }
    }

    pub fn desk() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            steps: 600,
            warmup: 50,
            chunk_size: 32,
            clip_norm: Some(1.0),
            ..TrainConfig::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.chunk_size == 0 || !self.batch_size.is_multiple_of(self.chunk_size) {
            return Err(Error::Config(format!(
                "chunk size {} must divide batch size {}",
                self.chunk_size, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Supplies the batch for a given step. Batches must depend only on
/// `(seed, step)` so interrupted runs resume exactly.
pub trait PairSource {
    fn batch(&self, step: u64, size: usize, seed: u64) -> Result<Batch>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wallclock: f64,
}

/// Where to write metrics and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct RunDir {
    pub metrics: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub optimizer: AdamWState,
    pub log: Vec<StepLog>,
}

/// One optimisation step; returns the batch loss.
pub fn train_step(
    model: &Model,
    params: &mut ParamStore,
    state: &mut AdamWState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    trainable: &Arc<std::collections::BTreeSet<String>>,
) -> Result<f64> {
    let grads = Grads::restricted(Arc::clone(trainable));
    let chunk = cfg.chunk_size.min(batch.len());
    let out = if chunk >= batch.len() || !batch.len().is_multiple_of(chunk) {
        full_batch_step(model, params, batch, cfg.temperature, grads)?
    } else {
        grad_cache_step(model, params, batch, cfg.temperature, chunk, grads)?
    };
    let mut grads = out.grads;
    if let Some(max) = cfg.clip_norm {
        let n = grads.global_norm();
        if !n.is_finite() {
            return Err(Error::NonFiniteGradient("global norm".into()));
        }
        if n > max {
            grads.scale_in_place(max / n);
        }
    }
    adamw_update(params, &grads, state, lr, &cfg.adamw)?;
    Ok(out.loss)
}

fn open_metrics(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

/// Runs steps `state.step + 1 ..= cfg.steps`. Pass the optimizer state
/// from a checkpoint to resume.
pub fn train(
    model: &Model,
    params: ParamStore,
    source: &dyn PairSource,
    cfg: &TrainConfig,
    resume: Option<AdamWState>,
    run: &RunDir,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = params.cast(cfg.precision);
    let trainable = Arc::new(model.trainable_ids(&params));
    let mut state = resume.unwrap_or_default();
    let mut metrics = match &run.metrics {
        Some(p) => Some((open_metrics(p, state.step > 0)?, p.clone())),
        None => None,
    };
    let started = Instant::now();
    let mut log = Vec::new();
    while state.step < cfg.steps {
        let step = state.step + 1;
        let lr = warmup_lr(cfg.lr, step, cfg.warmup);
        let batch = source.batch(step, cfg.batch_size, cfg.seed)?;
        let loss = train_step(model, &mut params, &mut state, &batch, cfg, lr, &trainable)?;
        let entry = StepLog {
            step,
            loss,
            lr,
            wallclock: started.elapsed().as_secs_f64(),
        };
        log::debug!("step {step} loss {loss:.5} lr {lr:.2e}");
        if let Some((w, path)) = &mut metrics {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        log.push(entry);
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &run.checkpoints) {
            if every > 0 && (step.is_multiple_of(every) || step == cfg.steps) {
                Checkpoint {
                    model: model.clone(),
                    params: params.clone(),
                    optimizer: Some(state.clone()),
                    train: Some(cfg.clone()),
                }
                .save(&dir.join(format!("step-{step:06}")))?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer: state,
        log,
    })
}
