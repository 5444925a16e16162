//! Full-batch and gradient-cached contrastive steps.

use std::collections::HashSet;
use sha2::{Digest, Sha256};

use super::info_nce::info_nce;
use crate::embedder::{EmbedInput, Model, Tape};
use crate::error::{Error, Result};
use crate::numkernel::{Grads, ParamStore, Tensor};

/// A query with its positive target.
#[derive(Debug, Clone)]
pub struct Pair {
    pub query: EmbedInput,
    pub target: EmbedInput,
    pub task: String,
}

/// Pairs with pairwise-distinct target texts.
#[derive(Debug, Clone)]
pub struct Batch {
    pairs: Vec<Pair>,
}

fn target_key(pair: &Pair) -> Result<[u8; 32]> {
    let mut h = Sha256::new();
    h.update(pair.target.full_text()?.as_bytes());
    if let Some(img) = &pair.target.image {
        for v in img.data() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().into())
}

impl Batch {
    /// Keeps the first pair for each distinct target, so no in-batch
    /// negative duplicates a positive.
    pub fn dedup(pairs: Vec<Pair>) -> Result<Batch> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(pairs.len());
        for p in pairs {
            if seen.insert(target_key(&p)?) {
                kept.push(p);
            }
        }
        Ok(Batch { pairs: kept })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Grads,
}

fn stack(rows: &[Tensor]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Tensor::len);
    let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), d], data)?)
}

fn row(t: &Tensor, i: usize) -> Tensor {
    Tensor::vector(t.row(i).to_vec())
}

/// Embeds every pair with backward state live, applies InfoNCE and
/// backpropagates. Gradients are accumulated in pair order.
pub fn full_batch_step(model: &Model, p: &ParamStore, batch: &Batch, tau: f64, grads: Grads) -> Result<StepOutput> {
    let mut tapes: Vec<(Tape, Tape)> = Vec::with_capacity(batch.len());
    let mut zq = Vec::with_capacity(batch.len());
    let mut zt = Vec::with_capacity(batch.len());
    for pair in batch.pairs() {
        let (q, tq) = model.embed_with_tape(p, &pair.query)?;
        let (t, tt) = model.embed_with_tape(p, &pair.target)?;
        zq.push(q.vector().clone());
        zt.push(t.vector().clone());
        tapes.push((tq, tt));
    }
    let out = info_nce(&stack(&zq)?, &stack(&zt)?, tau)?;
    let mut grads = grads;
    for (i, (tq, tt)) in tapes.iter().enumerate() {
        model.backward(p, tq, &row(&out.dq, i), &mut grads)?;
        model.backward(p, tt, &row(&out.dt, i), &mut grads)?;
    }
    Ok(StepOutput { loss: out.loss, grads })
}

/// Result of the first gradient-cache pass: embeddings and their loss
/// gradients, bound to the parameter fingerprint they were computed under.
#[derive(Debug, Clone)]
pub struct CachedEmbeddings {
    pub loss: f64,
    dq: Tensor,
    dt: Tensor,
    fingerprint: String,
    chunk: usize,
}

impl CachedEmbeddings {
    /// Pass 1: embed all pairs without keeping backward state.
    pub fn compute(model: &Model, p: &ParamStore, batch: &Batch, tau: f64, chunk: usize) -> Result<CachedEmbeddings> {
        if chunk == 0 || !batch.len().is_multiple_of(chunk) {
            return Err(Error::Config(format!(
                "chunk size {chunk} does not divide batch size {}",
                batch.len()
            )));
        }
        let mut zq = Vec::with_capacity(batch.len());
        let mut zt = Vec::with_capacity(batch.len());
        for pair in batch.pairs() {
            zq.push(model.embed(p, &pair.query)?.vector().clone());
            zt.push(model.embed(p, &pair.target)?.vector().clone());
        }
        let out = info_nce(&stack(&zq)?, &stack(&zt)?, tau)?;
        Ok(CachedEmbeddings {
            loss: out.loss,
            dq: out.dq,
            dt: out.dt,
            fingerprint: p.fingerprint(),
            chunk,
        })
    }

    /// Pass 2: re-embed chunk by chunk with backward state and inject the
    /// cached embedding gradients. Fails if the parameters changed since
    /// pass 1.
    pub fn backward(&self, model: &Model, p: &ParamStore, batch: &Batch, grads: Grads) -> Result<Grads> {
        let now = p.fingerprint();
        if now != self.fingerprint {
            return Err(Error::Integrity(format!(
                "parameters changed between passes ({} → {})",
                &self.fingerprint[..12],
                &now[..12]
            )));
        }
        if self.dq.dims2()?.0 != batch.len() {
            return Err(Error::Integrity("cached embeddings belong to another batch".into()));
        }
        let mut grads = grads;
        for start in (0..batch.len()).step_by(self.chunk) {
            let mut tapes = Vec::with_capacity(self.chunk);
            for pair in &batch.pairs()[start..start + self.chunk] {
                let (_, tq) = model.embed_with_tape(p, &pair.query)?;
                let (_, tt) = model.embed_with_tape(p, &pair.target)?;
                tapes.push((tq, tt));
            }
            for (k, (tq, tt)) in tapes.iter().enumerate() {
                model.backward(p, tq, &row(&self.dq, start + k), &mut grads)?;
                model.backward(p, tt, &row(&self.dt, start + k), &mut grads)?;
            }
        }
        Ok(grads)
    }
}

/// Both gradient-cache passes back to back.
pub fn grad_cache_step(
    model: &Model,
    p: &ParamStore,
    batch: &Batch,
    tau: f64,
    chunk: usize,
    grads: Grads,
) -> Result<StepOutput> {
    let cached = CachedEmbeddings::compute(model, p, batch, tau, chunk)?;
    let grads = cached.backward(model, p, batch, grads)?;
    Ok(StepOutput { loss: cached.loss, grads })
}
