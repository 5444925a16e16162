//! Patch-based global vision encoder followed by the vision-language
//! projection into the language model width.

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::layers::{Block, BlockCache, Linear, LinearCache, Norm, INIT_STD};
use crate::numkernel::{LayerNormCache, ParamStore, SeededRng, Tensor, Grads};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub patch: usize,
    /// Internal encoder width; must be divisible by 4 and by `heads`.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_width: usize,
    /// Output width (the language model width).
    pub out: usize,
}

impl VisionConfig {
    pub fn desk(out: usize) -> VisionConfig {
        VisionConfig {
            patch: 8,
            width: 32,
            blocks: 2,
            heads: 4,
            mlp_width: 64,
            out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.width == 0 || self.out == 0 {
            return Err(Error::Config("vision sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(4) || !self.width.is_multiple_of(self.heads.max(1)) || self.heads == 0 {
            return Err(Error::Config(format!(
                "vision width {} must be divisible by 4 and by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// `|v|×d` global context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVisionEmbeddings {
    pub tokens: Tensor,
}

pub struct VisionCache {
    patch: LinearCache,
    blocks: Vec<BlockCache>,
    ln: LayerNormCache,
    proj: LinearCache,
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    cfg: VisionConfig,
    patch: Linear,
    blocks: Vec<Block>,
    ln: Norm,
    proj: Linear,
}

impl VisionEncoder {
    pub fn new(cfg: VisionConfig) -> Result<VisionEncoder> {
        cfg.validate()?;
        Ok(VisionEncoder {
            cfg,
            patch: Linear::new("vision.patch"),
            blocks: (0..cfg.blocks)
                .map(|i| Block::from_prefix(&format!("vision.block{i}"), cfg.heads, false))
                .collect(),
            ln: Norm {
                gain: "vision.ln_f.gain".into(),
                shift: "vision.ln_f.shift".into(),
            },
            proj: Linear::new("vision.vl"),
        })
    }

    pub fn init(params: &mut ParamStore, rng: &mut SeededRng, cfg: VisionConfig) -> Result<VisionEncoder> {
        let enc = VisionEncoder::new(cfg)?;
        let pin = cfg.patch * cfg.patch * 3;
        Linear::init(params, rng, "vision.patch", pin, cfg.width, 1.0 / (pin as f64).sqrt());
        for i in 0..cfg.blocks {
            Block::init(params, rng, &format!("vision.block{i}"), cfg.width, cfg.mlp_width, cfg.heads, false);
        }
        Norm::init(params, "vision.ln_f", cfg.width);
        Linear::init(params, rng, "vision.vl", cfg.width, cfg.out, INIT_STD);
        Ok(enc)
    }

    pub fn config(&self) -> &VisionConfig {
        &self.cfg
    }

    /// Token count for an image; remainders smaller than a patch are cropped.
    pub fn token_count(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.cfg.patch;
        if height < p || width < p {
            return Err(Error::Geometry(format!(
                "image {height}×{width} is smaller than one {p}×{p} patch"
            )));
        }
        Ok((height / p) * (width / p))
    }

    fn patchify(&self, image: &Image) -> Result<Tensor> {
        let p = self.cfg.patch;
        let n = self.token_count(image.height(), image.width())?;
        let cols = image.width() / p;
        let mut out = Vec::with_capacity(n * p * p * 3);
        for t in 0..n {
            let (r, c) = (t / cols, t % cols);
            for py in 0..p {
                for px in 0..p {
                    out.extend(image.pixel(r * p + py, c * p + px));
                }
            }
        }
        Ok(Tensor::new(vec![n, p * p * 3], out)?)
    }

    /// Fixed 2D sinusoidal positions: the first half of the channels encode
    /// the patch row, the second half the patch column.
    fn positions(&self, rows: usize, cols: usize) -> Tensor {
        let w = self.cfg.width;
        let quarter = w / 4;
        let mut data = Vec::with_capacity(rows * cols * w);
        for t in 0..rows * cols {
            for coord in [(t / cols) as f64, (t % cols) as f64] {
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    data.push((coord * freq).sin());
                }
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    data.push((coord * freq).cos());
                }
            }
        }
        Tensor::new(vec![rows * cols, w], data).expect("finite positions")
    }

    /// Linear patch embeddings before positions and attention.
    pub fn patch_embed(&self, p: &ParamStore, image: &Image) -> Result<Tensor> {
        Ok(self.patch.forward(p, &self.patchify(image)?)?.0)
    }

    pub fn forward(&self, p: &ParamStore, image: &Image) -> Result<(GlobalVisionEmbeddings, VisionCache)> {
        let patches = self.patchify(image)?;
        let cols = image.width() / self.cfg.patch;
        let rows = image.height() / self.cfg.patch;
        let (emb, patch) = self.patch.forward(p, &patches)?;
        let mut x = emb.add(&self.positions(rows, cols))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &x)?;
            blocks.push(c);
            x = y;
        }
        let (h, ln) = self.ln.forward(p, &x)?;
        let (tokens, proj) = self.proj.forward(p, &h)?;
        Ok((
            GlobalVisionEmbeddings { tokens },
            VisionCache {
                patch,
                blocks,
                ln,
                proj,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &VisionCache, dy: &Tensor, g: &mut Grads) -> Result<()> {
        let dh = self.proj.backward(p, &cache.proj, dy, g)?;
        let mut dx = self.ln.backward(p, &cache.ln, &dh, g)?;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(p, c, &dx, g)?;
        }
        self.patch.backward(p, &cache.patch, &dx, g)?;
        Ok(())
    }
}
