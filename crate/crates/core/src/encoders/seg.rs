//! Prompt-conditioned segmentation stand-in: a Fourier-feature prompt
//! encoder with a dense coverage cue, a strided-conv image encoder and a
//! one-block cross-attention mask decoder whose residual output is the
//! feature map.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::prompt::{coverage, downsample_mask, VisualPrompt};
use crate::error::{Error, Result};
use crate::layers::{Linear, LinearCache};
use crate::numkernel::{
    attention, attention_backward, conv2d, conv2d_backward, gelu, gelu_backward, matmul,
    sum_rows, AttentionCache, Grads, KernelError, ParamStore, SeededRng, Tensor,
};

const MASK_KERNEL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Side of the square feature grid.
    pub grid: usize,
    /// Channel width of the feature map.
    pub width: usize,
    /// Kernel and stride of the image stem; inputs are resampled to
    /// `grid·stem` pixels per side first.
    pub stem: usize,
    /// Number of random Fourier frequencies per coordinate encoding.
    pub fourier: usize,
    pub heads: usize,
    /// Start the decoder output projection at zero, making the decoder an
    /// identity on image features until trained.
    pub zero_output_proj: bool,
}

impl SegConfig {
    pub fn desk() -> SegConfig {
        SegConfig {
            grid: 16,
            width: 32,
            stem: 2,
            fourier: 16,
            heads: 4,
            zero_output_proj: false,
        }
    }

    pub fn full_scale() -> SegConfig {
        SegConfig {
            grid: 64,
            width: 256,
            stem: 16,
            fourier: 64,
            heads: 4,
            zero_output_proj: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 || !self.grid.is_multiple_of(2 * MASK_KERNEL) {
            return Err(Error::Config(format!(
                "feature grid {} must be a positive multiple of {}",
                self.grid,
                2 * MASK_KERNEL
            )));
        }
        if self.stem == 0 || self.fourier == 0 || self.width == 0 {
            return Err(Error::Config("seg widths must be positive".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "seg width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Prompt-conditioned `G×G×d_s` segmentation feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: Tensor,
}

impl FeatureMap {
    pub fn new(grid: Tensor) -> Result<FeatureMap> {
        match grid.shape() {
            [h, w, c] if h == w && *h > 0 && *c > 0 => Ok(FeatureMap { grid }),
            s => Err(Error::Geometry(format!(
                "feature map must be a square G×G×C grid, got {s:?}"
            ))),
        }
    }

    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.grid
    }

    pub fn into_tensor(self) -> Tensor {
        self.grid
    }
}

#[derive(Debug, Clone)]
struct Ids {
    fourier: String,
    point_type: String,
    corner_tl: String,
    corner_br: String,
    box_token: String,
    mask_conv_w: String,
    mask_conv_b: String,
    mask_type: String,
    dense_in: String,
    dense_out: String,
    image_conv_w: String,
    image_conv_b: String,
    sink: String,
}

impl Ids {
    fn new() -> Ids {
        let p = |s: &str| format!("seg.{s}");
        Ids {
            fourier: p("prompt.fourier"),
            point_type: p("prompt.point_type"),
            corner_tl: p("prompt.corner_tl"),
            corner_br: p("prompt.corner_br"),
            box_token: p("prompt.box_token"),
            mask_conv_w: p("prompt.mask_conv.w"),
            mask_conv_b: p("prompt.mask_conv.b"),
            mask_type: p("prompt.mask_type"),
            dense_in: p("prompt.dense_in"),
            dense_out: p("prompt.dense_out"),
            image_conv_w: p("image.conv.w"),
            image_conv_b: p("image.conv.b"),
            sink: p("decoder.sink"),
        }
    }
}

/// Backward state for [`SegModel::prompt_encode`].
pub struct PromptCache {
    kind: PromptKind,
}

enum PromptKind {
    Points {
        proj: LinearCache,
    },
    Box {
        proj: LinearCache,
    },
    Mask {
        raster: Tensor,
        pre_act: Tensor,
    },
}

pub struct ImageCache {
    resampled: Tensor,
}

pub struct DecodeCache {
    pe: LinearCache,
    q: LinearCache,
    k: LinearCache,
    v: LinearCache,
    attn: AttentionCache,
    o: LinearCache,
    prompt_tokens: usize,
}

pub struct SegCache {
    prompt: PromptCache,
    cover: Vec<f64>,
    image: ImageCache,
    decode: DecodeCache,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    cfg: SegConfig,
    ids: Ids,
    proj: Linear,
    dq: Linear,
    dk: Linear,
    dv: Linear,
    dout: Linear,
}

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl SegModel {
    /// Parameter ids only; values come from a [`ParamStore`].
    pub fn new(cfg: SegConfig) -> Result<SegModel> {
        cfg.validate()?;
        Ok(SegModel {
            cfg,
            ids: Ids::new(),
            proj: Linear::new("seg.prompt.proj"),
            dq: Linear::new("seg.decoder.q"),
            dk: Linear::new("seg.decoder.k"),
            dv: Linear::new("seg.decoder.v"),
            dout: Linear::new("seg.decoder.o"),
        })
    }

    pub fn init(params: &mut ParamStore, rng: &mut SeededRng, cfg: SegConfig) -> Result<SegModel> {
        let m = SegModel::new(cfg)?;
        let (d, f) = (cfg.width, cfg.fourier);
        params.insert(m.ids.fourier.clone(), rng.normal_tensor(&[2, f], 1.0));
        Linear::init(params, rng, "seg.prompt.proj", 2 * f, d, fan_in_std(2 * f));
        for id in [
            &m.ids.point_type,
            &m.ids.corner_tl,
            &m.ids.corner_br,
            &m.ids.box_token,
            &m.ids.mask_type,
            &m.ids.dense_in,
            &m.ids.dense_out,
            &m.ids.sink,
        ] {
            params.insert(id.clone(), rng.normal_tensor(&[d], 1.0 / (d as f64).sqrt()));
        }
        let mk = MASK_KERNEL * MASK_KERNEL;
        params.insert(
            m.ids.mask_conv_w.clone(),
            rng.normal_tensor(&[MASK_KERNEL, MASK_KERNEL, 1, d], fan_in_std(mk)),
        );
        params.insert(m.ids.mask_conv_b.clone(), Tensor::zeros(&[d]));
        let sk = cfg.stem * cfg.stem * 3;
        params.insert(
            m.ids.image_conv_w.clone(),
            rng.normal_tensor(&[cfg.stem, cfg.stem, 3, d], fan_in_std(sk)),
        );
        params.insert(m.ids.image_conv_b.clone(), Tensor::zeros(&[d]));
        for name in ["q", "k", "v"] {
            Linear::init(params, rng, &format!("seg.decoder.{name}"), d, d, fan_in_std(d));
        }
        let o = Linear::init(params, rng, "seg.decoder.o", d, d, fan_in_std(d));
        if cfg.zero_output_proj {
            params.insert(o.w, Tensor::zeros(&[d, d]));
        }
        Ok(m)
    }

    pub fn config(&self) -> &SegConfig {
        &self.cfg
    }

    /// Parameters that are never trained (the random Fourier basis).
    pub fn fixed_ids() -> Vec<String> {
        vec![Ids::new().fourier]
    }

    /// `[sin, cos]` of `2π (2c − 1) B` for each row of `[x, y]` coordinates.
    fn fourier_features(&self, p: &ParamStore, coords: &[[f64; 2]]) -> Result<Tensor> {
        let b = p.get(&self.ids.fourier)?;
        let f = self.cfg.fourier;
        let c = Tensor::from_rows(
            &coords
                .iter()
                .map(|[x, y]| vec![2.0 * x - 1.0, 2.0 * y - 1.0])
                .collect::<Vec<_>>(),
        )?;
        let proj = matmul(&c, b)?;
        let mut out = Vec::with_capacity(coords.len() * 2 * f);
        for i in 0..coords.len() {
            let row = proj.row(i);
            out.extend(row.iter().map(|v| (2.0 * PI * v).sin()));
            out.extend(row.iter().map(|v| (2.0 * PI * v).cos()));
        }
        Ok(Tensor::with_dtype(vec![coords.len(), 2 * f], out, b.dtype())?)
    }

    fn add_row(t: &mut Tensor, row: usize, v: &Tensor) {
        for (a, b) in t.row_mut(row).iter_mut().zip(v.data()) {
            *a += b;
        }
    }

    /// Prompt tokens `q×d_s`: one per point, three for a box (two corners
    /// and a box token), four for a mask (quadrant pools of a conv stem).
    pub fn prompt_encode(&self, p: &ParamStore, prompt: &VisualPrompt) -> Result<(Tensor, PromptCache)> {
        prompt.validate()?;
        let d = self.cfg.width;
        match prompt {
            VisualPrompt::Points { points } => {
                let ff = self.fourier_features(p, points)?;
                let (mut y, proj) = self.proj.forward(p, &ff)?;
                let ty = p.get(&self.ids.point_type)?;
                for i in 0..points.len() {
                    Self::add_row(&mut y, i, ty);
                }
                Ok((y, PromptCache { kind: PromptKind::Points { proj } }))
            }
            VisualPrompt::Box {
                x_min,
                y_min,
                width,
                height,
            } => {
                let corners = [[*x_min, *y_min], [x_min + width, y_min + height]];
                let ff = self.fourier_features(p, &corners)?;
                let (mut y, proj) = self.proj.forward(p, &ff)?;
                Self::add_row(&mut y, 0, p.get(&self.ids.corner_tl)?);
                Self::add_row(&mut y, 1, p.get(&self.ids.corner_br)?);
                let token = p.get(&self.ids.box_token)?.reshape(&[1, d])?;
                let y = Tensor::concat_rows(&[&y, &token])?;
                Ok((y, PromptCache { kind: PromptKind::Box { proj } }))
            }
            VisualPrompt::Mask {
                height,
                width,
                data,
            } => {
                let g = self.cfg.grid;
                let raster = Tensor::new(vec![g, g, 1], downsample_mask(*height, *width, data, g))?;
                let pre_act = conv2d(
                    &raster,
                    p.get(&self.ids.mask_conv_w)?,
                    MASK_KERNEL,
                    p.get(&self.ids.mask_conv_b)?,
                )?;
                let act = gelu(&pre_act)?;
                let mut y = quadrant_pool(&act)?;
                let ty = p.get(&self.ids.mask_type)?;
                for i in 0..4 {
                    Self::add_row(&mut y, i, ty);
                }
                Ok((y, PromptCache { kind: PromptKind::Mask { raster, pre_act } }))
            }
            VisualPrompt::Absent => Err(Error::Contract(
                "absent prompts must be resolved to sampled points before encoding".into(),
            )),
        }
    }

    pub fn prompt_backward(
        &self,
        p: &ParamStore,
        cache: &PromptCache,
        dy: &Tensor,
        g: &mut Grads,
    ) -> Result<()> {
        match &cache.kind {
            PromptKind::Points { proj } => {
                g.accumulate(&self.ids.point_type, sum_rows(dy)?)?;
                self.proj.backward(p, proj, dy, g)?;
            }
            PromptKind::Box { proj } => {
                let d = self.cfg.width;
                g.accumulate(&self.ids.corner_tl, Tensor::vector(dy.row(0).to_vec()))?;
                g.accumulate(&self.ids.corner_br, Tensor::vector(dy.row(1).to_vec()))?;
                g.accumulate(&self.ids.box_token, Tensor::new(vec![d], dy.row(2).to_vec())?)?;
                self.proj.backward(p, proj, &dy.slice_rows(0, 2)?, g)?;
            }
            PromptKind::Mask { raster, pre_act } => {
                g.accumulate(&self.ids.mask_type, sum_rows(dy)?)?;
                let dact = quadrant_pool_backward(pre_act.shape(), dy)?;
                let dpre = gelu_backward(pre_act, &dact)?;
                let cg = conv2d_backward(raster, p.get(&self.ids.mask_conv_w)?, MASK_KERNEL, &dpre)?;
                g.accumulate(&self.ids.mask_conv_w, cg.dkernel)?;
                g.accumulate(&self.ids.mask_conv_b, cg.dbias)?;
            }
        }
        Ok(())
    }

    /// Unconditioned `G×G×d_s` image features: bilinear resample to
    /// `G·stem` pixels, then a `stem×stem` conv with matching stride.
    pub fn image_encode(&self, p: &ParamStore, image: &Image) -> Result<(Tensor, ImageCache)> {
        let r = self.cfg.grid * self.cfg.stem;
        let resampled = Tensor::new(vec![r, r, 3], image.resample(r, r))?;
        let y = conv2d(
            &resampled,
            p.get(&self.ids.image_conv_w)?,
            self.cfg.stem,
            p.get(&self.ids.image_conv_b)?,
        )?;
        Ok((y, ImageCache { resampled }))
    }

    pub fn image_backward(
        &self,
        p: &ParamStore,
        cache: &ImageCache,
        dy: &Tensor,
        g: &mut Grads,
    ) -> Result<()> {
        if !g.wants(&self.ids.image_conv_w) && !g.wants(&self.ids.image_conv_b) {
            return Ok(());
        }
        let cg = conv2d_backward(&cache.resampled, p.get(&self.ids.image_conv_w)?, self.cfg.stem, dy)?;
        g.accumulate(&self.ids.image_conv_w, cg.dkernel)?;
        g.accumulate(&self.ids.image_conv_b, cg.dbias)?;
        Ok(())
    }

    fn cell_centres(&self) -> Vec<[f64; 2]> {
        let g = self.cfg.grid;
        let c = |i: usize| (i as f64 + 0.5) / g as f64;
        (0..g * g).map(|cell| [c(cell % g), c(cell / g)]).collect()
    }

    /// Each grid cell (plus its positional encoding) attends over the
    /// prompt tokens and a learned sink; the projected result is added to
    /// the image features.
    pub fn mask_decode(
        &self,
        p: &ParamStore,
        prompt_tokens: &Tensor,
        image_feats: &Tensor,
    ) -> Result<(FeatureMap, DecodeCache)> {
        let (gsz, d) = (self.cfg.grid, self.cfg.width);
        let (q_count, pw) = prompt_tokens.dims2()?;
        if pw != d || image_feats.shape() != [gsz, gsz, d] {
            return Err(KernelError::Dimension(format!(
                "mask decoder expects prompt tokens q×{d} and features {:?}, got {:?} and {:?}",
                [gsz, gsz, d],
                prompt_tokens.shape(),
                image_feats.shape()
            ))
            .into());
        }
        let x = image_feats.reshape(&[gsz * gsz, d])?;
        let ff = self.fourier_features(p, &self.cell_centres())?;
        let (pe, pe_cache) = self.proj.forward(p, &ff)?;
        let sink = p.get(&self.ids.sink)?.reshape(&[1, d])?;
        let keys = Tensor::concat_rows(&[prompt_tokens, &sink])?;
        let (q, qc) = self.dq.forward(p, &x.add(&pe)?)?;
        let (k, kc) = self.dk.forward(p, &keys)?;
        let (v, vc) = self.dv.forward(p, &keys)?;
        let (a, attn) = attention(&q, &k, &v, self.cfg.heads, false)?;
        let (o, oc) = self.dout.forward(p, &a)?;
        let out = x.add(&o)?.reshape(&[gsz, gsz, d])?;
        Ok((
            FeatureMap::new(out)?,
            DecodeCache {
                pe: pe_cache,
                q: qc,
                k: kc,
                v: vc,
                attn,
                o: oc,
                prompt_tokens: q_count,
            },
        ))
    }

    /// Returns gradients for the prompt tokens and the image features.
    pub fn mask_decode_backward(
        &self,
        p: &ParamStore,
        cache: &DecodeCache,
        dmap: &Tensor,
        g: &mut Grads,
    ) -> Result<(Tensor, Tensor)> {
        let (gsz, d) = (self.cfg.grid, self.cfg.width);
        let dx_res = dmap.reshape(&[gsz * gsz, d])?;
        let da = self.dout.backward(p, &cache.o, &dx_res, g)?;
        let (dq, dk, dv) = attention_backward(&cache.attn, &da)?;
        let dqin = self.dq.backward(p, &cache.q, &dq, g)?;
        self.proj.backward(p, &cache.pe, &dqin, g)?;
        let mut dkeys = self.dk.backward(p, &cache.k, &dk, g)?;
        dkeys.add_assign(&self.dv.backward(p, &cache.v, &dv, g)?)?;
        let qn = cache.prompt_tokens;
        g.accumulate(&self.ids.sink, Tensor::vector(dkeys.row(qn).to_vec()))?;
        let dtokens = dkeys.slice_rows(0, qn)?;
        let dfeats = dx_res.add(&dqin)?.reshape(&[gsz, gsz, d])?;
        Ok((dtokens, dfeats))
    }

    /// Dense prompt cue added to every cell: `c·inside + (1 − c)·outside`
    /// for cell coverage `c`.
    fn add_dense(&self, p: &ParamStore, cover: &[f64], feats: &mut Tensor) -> Result<()> {
        let d = self.cfg.width;
        let (inside, outside) = (p.get(&self.ids.dense_in)?.data(), p.get(&self.ids.dense_out)?.data());
        for (cell, c) in cover.iter().enumerate() {
            let row = &mut feats.data_mut()[cell * d..(cell + 1) * d];
            for ((v, a), b) in row.iter_mut().zip(inside).zip(outside) {
                *v += c * a + (1.0 - c) * b;
            }
        }
        Ok(())
    }

    fn dense_backward(&self, cover: &[f64], dfeats: &Tensor, g: &mut Grads) -> Result<()> {
        let d = self.cfg.width;
        let (mut gi, mut go) = (vec![0.0; d], vec![0.0; d]);
        for (cell, c) in cover.iter().enumerate() {
            for (k, v) in dfeats.data()[cell * d..(cell + 1) * d].iter().enumerate() {
                gi[k] += c * v;
                go[k] += (1.0 - c) * v;
            }
        }
        g.accumulate(&self.ids.dense_in, Tensor::with_dtype(vec![d], gi, dfeats.dtype())?)?;
        g.accumulate(&self.ids.dense_out, Tensor::with_dtype(vec![d], go, dfeats.dtype())?)?;
        Ok(())
    }

    /// Full streamline: prompt encoder and image encoder feed the decoder.
    pub fn forward(
        &self,
        p: &ParamStore,
        image: &Image,
        prompt: &VisualPrompt,
    ) -> Result<(FeatureMap, SegCache)> {
        prompt.validate_for(image.height(), image.width())?;
        let (tokens, prompt_cache) = self.prompt_encode(p, prompt)?;
        let (mut feats, image_cache) = self.image_encode(p, image)?;
        let cover = coverage(prompt, self.cfg.grid);
        self.add_dense(p, &cover, &mut feats)?;
        let (map, decode) = self.mask_decode(p, &tokens, &feats)?;
        Ok((
            map,
            SegCache {
                prompt: prompt_cache,
                cover,
                image: image_cache,
                decode,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &SegCache, dmap: &Tensor, g: &mut Grads) -> Result<()> {
        let (dtokens, dfeats) = self.mask_decode_backward(p, &cache.decode, dmap, g)?;
        self.prompt_backward(p, &cache.prompt, &dtokens, g)?;
        self.dense_backward(&cache.cover, &dfeats, g)?;
        self.image_backward(p, &cache.image, &dfeats, g)
    }
}

/// Mean over the four spatial quadrants of an `h×w×c` grid → `4×c`, in
/// row-major quadrant order.
fn quadrant_pool(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match x.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Geometry(format!("quadrant pool needs H×W×C, got {s:?}"))),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry(format!("quadrant pool needs even sides, got {h}×{w}")));
    }
    let (hh, hw) = (h / 2, w / 2);
    let scale = 1.0 / (hh * hw) as f64;
    let mut out = vec![0.0; 4 * c];
    for y in 0..h {
        for xx in 0..w {
            let quad = (y / hh) * 2 + xx / hw;
            let src = &x.data()[(y * w + xx) * c..(y * w + xx + 1) * c];
            for (o, v) in out[quad * c..(quad + 1) * c].iter_mut().zip(src) {
                *o += v * scale;
            }
        }
    }
    Ok(Tensor::with_dtype(vec![4, c], out, x.dtype())?)
}

fn quadrant_pool_backward(shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (hh, hw) = (h / 2, w / 2);
    let scale = 1.0 / (hh * hw) as f64;
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let quad = (y / hh) * 2 + xx / hw;
            for ch in 0..c {
                out[(y * w + xx) * c + ch] = dy.data()[quad * c + ch] * scale;
            }
        }
    }
    Ok(Tensor::with_dtype(shape.to_vec(), out, dy.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(zero: bool) -> (SegModel, ParamStore) {
        let mut p = ParamStore::new();
        let cfg = SegConfig {
            zero_output_proj: zero,
            ..SegConfig::desk()
        };
        let m = SegModel::init(&mut p, &mut SeededRng::new(3), cfg).unwrap();
        (m, p)
    }

    #[test]
    fn prompt_token_counts() {
        let (m, p) = model(false);
        let (t, _) = m.prompt_encode(&p, &VisualPrompt::point(0.5, 0.5)).unwrap();
        assert_eq!(t.shape(), &[1, 32]);
        let (t2, _) = m.prompt_encode(&p, &VisualPrompt::point(0.5, 0.5)).unwrap();
        assert_eq!(t, t2);
        let (b, _) = m.prompt_encode(&p, &VisualPrompt::boxed(0.1, 0.1, 0.5, 0.5)).unwrap();
        assert_eq!(b.shape(), &[3, 32]);
        let mask = VisualPrompt::Mask {
            height: 16,
            width: 16,
            data: vec![1; 256],
        };
        let (mk, _) = m.prompt_encode(&p, &mask).unwrap();
        assert_eq!(mk.shape(), &[4, 32]);
        assert!(matches!(
            m.prompt_encode(&p, &VisualPrompt::Absent),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn box_size_changes_tokens() {
        let (m, p) = model(false);
        let (full, _) = m.prompt_encode(&p, &VisualPrompt::boxed(0.0, 0.0, 1.0, 1.0)).unwrap();
        let (half, _) = m.prompt_encode(&p, &VisualPrompt::boxed(0.0, 0.0, 0.5, 0.5)).unwrap();
        assert!(full.sub(&half).unwrap().norm() > 0.0);
    }

    #[test]
    fn zero_image_gives_bias_everywhere() {
        let (m, mut p) = model(false);
        p.insert("seg.image.conv.b", Tensor::vector((0..32).map(|i| i as f64 * 0.1).collect()));
        let img = Image::filled(20, 24, [0.0; 3]).unwrap();
        let (y, _) = m.image_encode(&p, &img).unwrap();
        assert_eq!(y.shape(), &[16, 16, 32]);
        let bias = p.get("seg.image.conv.b").unwrap().data().to_vec();
        for cell in 0..256 {
            assert_eq!(&y.data()[cell * 32..(cell + 1) * 32], bias.as_slice());
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let (m, p) = model(true);
        let img = Image::filled(32, 32, [0.3, 0.6, 0.9]).unwrap();
        let (feats, _) = m.image_encode(&p, &img).unwrap();
        for prompt in [VisualPrompt::point(0.2, 0.7), VisualPrompt::boxed(0.1, 0.1, 0.3, 0.3)] {
            let (tok, _) = m.prompt_encode(&p, &prompt).unwrap();
            let (map, _) = m.mask_decode(&p, &tok, &feats).unwrap();
            assert_eq!(map.tensor(), &feats);
        }
    }

    #[test]
    fn decode_shape_ignores_token_count() {
        let (m, p) = model(false);
        let feats = Tensor::zeros(&[16, 16, 32]);
        for q in [1, 3, 9] {
            let (map, _) = m.mask_decode(&p, &Tensor::full(&[q, 32], 0.1), &feats).unwrap();
            assert_eq!(map.tensor().shape(), &[16, 16, 32]);
        }
        assert!(m.mask_decode(&p, &Tensor::zeros(&[2, 31]), &feats).is_err());
    }

    #[test]
    fn distinct_points_give_distinct_maps() {
        let (m, p) = model(false);
        let img = Image::filled(32, 32, [0.5; 3]).unwrap();
        let (a, _) = m.forward(&p, &img, &VisualPrompt::point(0.2, 0.2)).unwrap();
        let (b, _) = m.forward(&p, &img, &VisualPrompt::point(0.8, 0.8)).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()).unwrap() > 0.0);
    }

    #[test]
    fn config_checks() {
        let bad = SegConfig {
            grid: 12,
            ..SegConfig::desk()
        };
        assert!(SegModel::new(bad).is_err());
    }
}
