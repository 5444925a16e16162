//! Parameterised building blocks shared by the encoders and the language
//! model. Each layer stores parameter ids, reads values from a
//! [`ParamStore`] and writes gradients into [`Grads`].

use crate::numkernel::{
    add_row_bias, attention, attention_backward, gelu, gelu_backward, layer_norm,
    layer_norm_backward, matmul, matmul_nt, matmul_tn, sum_rows, AttentionCache, Grads,
    LayerNormCache, ParamStore, Result, SeededRng, Tensor,
};

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

/// Low-rank adapter ids attached to a [`Linear`].
#[derive(Debug, Clone)]
pub(crate) struct LoraIds {
    pub a: String,
    pub b: String,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: String,
    pub b: String,
    pub lora: Option<LoraIds>,
}

pub(crate) struct LinearCache {
    x: Tensor,
    u: Option<Tensor>,
}

impl Linear {
    pub fn new(prefix: &str) -> Linear {
        Linear {
            w: format!("{prefix}.w"),
            b: format!("{prefix}.b"),
            lora: None,
        }
    }

    /// Registers a weight drawn from a truncated normal and a zero bias.
    pub fn init(
        params: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
    ) -> Linear {
        let l = Linear::new(prefix);
        params.insert(l.w.clone(), rng.trunc_normal_tensor(&[fan_in, fan_out], std));
        params.insert(l.b.clone(), Tensor::zeros(&[fan_out]));
        l
    }

    pub fn with_lora(mut self, scale: f64) -> Linear {
        let prefix = self.w.trim_end_matches(".w").to_string();
        self.lora = Some(LoraIds {
            a: format!("{prefix}.lora_a"),
            b: format!("{prefix}.lora_b"),
            scale,
        });
        self
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let mut y = add_row_bias(&matmul(x, p.get(&self.w)?)?, p.get(&self.b)?)?;
        let mut u = None;
        if let Some(lora) = &self.lora {
            let xa = matmul(x, p.get(&lora.a)?)?;
            let delta = matmul(&xa, p.get(&lora.b)?)?.scale(lora.scale)?;
            y = y.add(&delta)?;
            u = Some(xa);
        }
        Ok((y, LinearCache { x: x.clone(), u }))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &LinearCache,
        dy: &Tensor,
        g: &mut Grads,
    ) -> Result<Tensor> {
        let w = p.get(&self.w)?;
        let mut dx = matmul_nt(dy, w)?;
        if g.wants(&self.w) {
            g.accumulate(&self.w, matmul_tn(&cache.x, dy)?)?;
        }
        if g.wants(&self.b) {
            g.accumulate(&self.b, sum_rows(dy)?)?;
        }
        if let (Some(lora), Some(u)) = (&self.lora, &cache.u) {
            let b = p.get(&lora.b)?;
            let a = p.get(&lora.a)?;
            let dy_s = dy.scale(lora.scale)?;
            if g.wants(&lora.b) {
                g.accumulate(&lora.b, matmul_tn(u, &dy_s)?)?;
            }
            let du = matmul_nt(&dy_s, b)?;
            if g.wants(&lora.a) {
                g.accumulate(&lora.a, matmul_tn(&cache.x, &du)?)?;
            }
            dx = dx.add(&matmul_nt(&du, a)?)?;
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gain: String,
    pub shift: String,
}

impl Norm {
    pub fn init(params: &mut ParamStore, prefix: &str, d: usize) -> Norm {
        let n = Norm {
            gain: format!("{prefix}.gain"),
            shift: format!("{prefix}.shift"),
        };
        params.insert(n.gain.clone(), Tensor::full(&[d], 1.0));
        params.insert(n.shift.clone(), Tensor::zeros(&[d]));
        n
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, LayerNormCache)> {
        layer_norm(x, p.get(&self.gain)?, p.get(&self.shift)?, LN_EPS)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor,
        g: &mut Grads,
    ) -> Result<Tensor> {
        let lg = layer_norm_backward(cache, p.get(&self.gain)?, dy)?;
        if g.wants(&self.gain) {
            g.accumulate(&self.gain, lg.dgain)?;
        }
        if g.wants(&self.shift) {
            g.accumulate(&self.shift, lg.dshift)?;
        }
        Ok(lg.dx)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub causal: bool,
}

pub(crate) struct BlockCache {
    ln1: LayerNormCache,
    q: LinearCache,
    k: LinearCache,
    v: LinearCache,
    attn: AttentionCache,
    o: LinearCache,
    ln2: LayerNormCache,
    fc1: LinearCache,
    pre_act: Tensor,
    fc2: LinearCache,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        params: &mut ParamStore,
        rng: &mut SeededRng,
        prefix: &str,
        d: usize,
        mlp_width: usize,
        heads: usize,
        causal: bool,
    ) -> Block {
        Block {
            ln1: Norm::init(params, &format!("{prefix}.ln1"), d),
            q: Linear::init(params, rng, &format!("{prefix}.attn_q"), d, d, INIT_STD),
            k: Linear::init(params, rng, &format!("{prefix}.attn_k"), d, d, INIT_STD),
            v: Linear::init(params, rng, &format!("{prefix}.attn_v"), d, d, INIT_STD),
            o: Linear::init(params, rng, &format!("{prefix}.attn_o"), d, d, INIT_STD),
            ln2: Norm::init(params, &format!("{prefix}.ln2"), d),
            fc1: Linear::init(params, rng, &format!("{prefix}.fc1"), d, mlp_width, INIT_STD),
            fc2: Linear::init(params, rng, &format!("{prefix}.fc2"), mlp_width, d, INIT_STD),
            heads,
            causal,
        }
    }

    /// Same parameters, rebuilt from ids only.
    pub fn from_prefix(prefix: &str, heads: usize, causal: bool) -> Block {
        Block {
            ln1: Norm {
                gain: format!("{prefix}.ln1.gain"),
                shift: format!("{prefix}.ln1.shift"),
            },
            q: Linear::new(&format!("{prefix}.attn_q")),
            k: Linear::new(&format!("{prefix}.attn_k")),
            v: Linear::new(&format!("{prefix}.attn_v")),
            o: Linear::new(&format!("{prefix}.attn_o")),
            ln2: Norm {
                gain: format!("{prefix}.ln2.gain"),
                shift: format!("{prefix}.ln2.shift"),
            },
            fc1: Linear::new(&format!("{prefix}.fc1")),
            fc2: Linear::new(&format!("{prefix}.fc2")),
            heads,
            causal,
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.fc1, &self.fc2]
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (h1, ln1) = self.ln1.forward(p, x)?;
        let (q, qc) = self.q.forward(p, &h1)?;
        let (k, kc) = self.k.forward(p, &h1)?;
        let (v, vc) = self.v.forward(p, &h1)?;
        let (a, attn) = attention(&q, &k, &v, self.heads, self.causal)?;
        let (ao, oc) = self.o.forward(p, &a)?;
        let x1 = x.add(&ao)?;
        let (h2, ln2) = self.ln2.forward(p, &x1)?;
        let (pre_act, f1c) = self.fc1.forward(p, &h2)?;
        let act = gelu(&pre_act)?;
        let (m, f2c) = self.fc2.forward(p, &act)?;
        let y = x1.add(&m)?;
        Ok((
            y,
            BlockCache {
                ln1,
                q: qc,
                k: kc,
                v: vc,
                attn,
                o: oc,
                ln2,
                fc1: f1c,
                pre_act,
                fc2: f2c,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        c: &BlockCache,
        dy: &Tensor,
        g: &mut Grads,
    ) -> Result<Tensor> {
        let dact = self.fc2.backward(p, &c.fc2, dy, g)?;
        let dpre = gelu_backward(&c.pre_act, &dact)?;
        let dh2 = self.fc1.backward(p, &c.fc1, &dpre, g)?;
        let dx1 = dy.add(&self.ln2.backward(p, &c.ln2, &dh2, g)?)?;
        let da = self.o.backward(p, &c.o, &dx1, g)?;
        let (dq, dk, dv) = attention_backward(&c.attn, &da)?;
        let mut dh1 = self.q.backward(p, &c.q, &dq, g)?;
        dh1.add_assign(&self.k.backward(p, &c.k, &dk, g)?)?;
        dh1.add_assign(&self.v.backward(p, &c.v, &dv, g)?)?;
        dx1.add(&self.ln1.backward(p, &c.ln1, &dh1, g)?)
    }
}
