//! Toy causal language model with learned absolute positions and LoRA
//! adapters on every linear layer of every block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Block, BlockCache, Norm, INIT_STD};
use crate::numkernel::{matmul, Grads, LayerNormCache, ParamStore, SeededRng, Tensor};

pub const EMBED_TABLE: &str = "lm.embed";
pub const POSITIONS: &str = "lm.pos";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d: usize,
    pub vocab: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub max_positions: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl LmConfig {
    pub fn desk(vocab: usize) -> LmConfig {
        LmConfig {
            d: 64,
            vocab,
            blocks: 2,
            heads: 4,
            mlp_width: 128,
            max_positions: 96,
            lora_rank: 8,
            lora_alpha: 64.0,
        }
    }

    /// Adapter output multiplier `alpha / rank`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "lm width {} must be a positive multiple of {} heads",
                self.d, self.heads
            )));
        }
        if self.vocab < 2 || self.max_positions == 0 || self.blocks == 0 {
            return Err(Error::Config("lm needs a vocabulary, positions and blocks".into()));
        }
        if self.lora_rank == 0 || self.lora_rank >= self.d.min(self.mlp_width) {
            return Err(Error::Config(format!(
                "lora rank {} must be positive and below the layer widths",
                self.lora_rank
            )));
        }
        Ok(())
    }
}

pub struct LmCache {
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    cfg: LmConfig,
    blocks: Vec<Block>,
    ln: Norm,
}

fn block_prefix(i: usize) -> String {
    format!("lm.block{i}")
}

impl LanguageModel {
    /// Ids only. `adapters` selects whether the LoRA path is evaluated.
    pub fn new(cfg: LmConfig, adapters: bool) -> Result<LanguageModel> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut b = Block::from_prefix(&block_prefix(i), cfg.heads, true);
                if adapters {
                    for l in b.linears_mut() {
                        *l = l.clone().with_lora(cfg.lora_scale());
                    }
                }
                b
            })
            .collect();
        Ok(LanguageModel {
            cfg,
            blocks,
            ln: Norm {
                gain: "lm.ln_f.gain".into(),
                shift: "lm.ln_f.shift".into(),
            },
        })
    }

    /// Random base weights plus adapters with `B = 0`.
    pub fn init(params: &mut ParamStore, rng: &mut SeededRng, cfg: LmConfig) -> Result<LanguageModel> {
        cfg.validate()?;
        params.insert(EMBED_TABLE, rng.normal_tensor(&[cfg.vocab, cfg.d], 1.0));
        params.insert(POSITIONS, rng.normal_tensor(&[cfg.max_positions, cfg.d], INIT_STD));
        for i in 0..cfg.blocks {
            Block::init(params, rng, &block_prefix(i), cfg.d, cfg.mlp_width, cfg.heads, true);
        }
        Norm::init(params, "lm.ln_f", cfg.d);
        let lm = LanguageModel::new(cfg, true)?;
        for b in &lm.blocks {
            for l in b.linears() {
                let lora = l.lora.as_ref().expect("adapters enabled");
                let (k, n) = params.get(&l.w)?.dims2()?;
                let r = cfg.lora_rank;
                params.insert(lora.a.clone(), rng.trunc_normal_tensor(&[k, r], 1.0 / (k as f64).sqrt()));
                params.insert(lora.b.clone(), Tensor::zeros(&[r, n]));
            }
        }
        Ok(lm)
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    /// Ids of every adapter matrix.
    pub fn adapter_ids(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| b.linears().into_iter().filter_map(|l| l.lora.clone()))
            .flat_map(|l| [l.a, l.b])
            .collect()
    }

    /// Folds `W + (alpha/r)·A·B` into the base weights and drops the
    /// adapter tensors. The returned model runs without adapters.
    pub fn merged(&self, params: &ParamStore) -> Result<(LanguageModel, ParamStore)> {
        let mut out = params.clone();
        let mut kept = ParamStore::new();
        for b in &self.blocks {
            for l in b.linears() {
                if let Some(lora) = &l.lora {
                    let delta = matmul(params.get(&lora.a)?, params.get(&lora.b)?)?.scale(lora.scale)?;
                    let w = params.get(&l.w)?.add(&delta)?;
                    out.insert(l.w.clone(), w);
                }
            }
        }
        let adapters = self.adapter_ids();
        for (id, t) in out.iter() {
            if !adapters.contains(id) {
                kept.insert(id.clone(), t.clone());
            }
        }
        Ok((LanguageModel::new(self.cfg, false)?, kept))
    }

    /// Adds positions `0..len` and runs the causal blocks and final norm.
    pub fn forward(&self, p: &ParamStore, tokens: &Tensor) -> Result<(Tensor, LmCache)> {
        let (len, d) = tokens.dims2()?;
        if d != self.cfg.d {
            return Err(crate::numkernel::KernelError::Dimension(format!(
                "sequence width {d} does not match model width {}",
                self.cfg.d
            ))
            .into());
        }
        if len == 0 || len > self.cfg.max_positions {
            return Err(Error::Validation(format!(
                "sequence length {len} outside 1..={}",
                self.cfg.max_positions
            )));
        }
        let pos = p.get(POSITIONS)?.slice_rows(0, len)?;
        let mut x = tokens.add(&pos)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &x)?;
            blocks.push(c);
            x = y;
        }
        let (h, ln) = self.ln.forward(p, &x)?;
        Ok((h, LmCache { blocks, ln }))
    }

    /// Returns the gradient for the input token rows.
    pub fn backward(&self, p: &ParamStore, cache: &LmCache, dh: &Tensor, g: &mut Grads) -> Result<Tensor> {
        let mut dx = self.ln.backward(p, &cache.ln, dh, g)?;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(p, c, &dx, g)?;
        }
        if g.wants(POSITIONS) {
            let (len, d) = dx.dims2()?;
            let mut gp = Tensor::zeros(&[self.cfg.max_positions, d]);
            gp.data_mut()[..len * d].copy_from_slice(dx.data());
            g.accumulate(POSITIONS, gp)?;
        }
        Ok(dx)
    }
}
