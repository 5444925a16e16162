//! Finite-difference oracle over every differentiable kernel, the
//! connector, the adapted language model and the contrastive loss.

use std::time::Instant;

use virtue_core::connector::{Connector, ConnectorConfig};
use virtue_core::embedder::{LanguageModel, LmConfig};
use virtue_core::encoders::FeatureMap;
use virtue_core::numkernel::{
    affine, affine_backward, attention, attention_backward, conv2d, conv2d_backward, finite_diff_check, gelu,
    gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, softmax_rows,
    softmax_rows_backward, FdConfig, Grads, ParamStore, SeededRng, Tensor,
};
use virtue_core::trainer::info_nce;
use virtue_core::Result;

const SEEDS: u64 = 50;
const TOL: f64 = 1e-4;

/// Weights for the scalar objective `sum(out ⊙ r)`.
fn probe(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0)
}

fn check<V, G>(name: &str, seed: u64, p: &ParamStore, value: V, grad: G)
where
    V: Fn(&ParamStore) -> Result<f64>,
    G: Fn(&ParamStore) -> Result<(f64, Grads)>,
{
    let cfg = FdConfig { seed, ..FdConfig::default() };
    let report = finite_diff_check(value, grad, p, &cfg).unwrap();
    assert!(report.coords_checked > 0);
    assert!(report.max_rel_error < TOL, "{name} seed {seed}: {report:?}");
}

fn grads(pairs: Vec<(&str, Tensor)>) -> Result<Grads> {
    let mut g = Grads::new();
    for (id, t) in pairs {
        g.accumulate(id, t)?;
    }
    Ok(g)
}

#[test]
fn matmul_variants() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        p.insert("a", rng.normal_tensor(&[3, 4], 1.0));
        p.insert("b", rng.normal_tensor(&[4, 5], 1.0));
        p.insert("c", rng.normal_tensor(&[5, 4], 1.0));
        p.insert("d", rng.normal_tensor(&[3, 5], 1.0));
        let (r1, r2, r3) = (probe(&mut rng, &[3, 5]), probe(&mut rng, &[3, 5]), probe(&mut rng, &[4, 5]));
        let f = |p: &ParamStore| -> Result<f64> {
            let (a, b, c, d) = (p.get("a")?, p.get("b")?, p.get("c")?, p.get("d")?);
            Ok(matmul(a, b)?.dot(&r1)? + matmul_nt(a, c)?.dot(&r2)? + matmul_tn(a, d)?.dot(&r3)?)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (a, b, c, d) = (p.get("a")?, p.get("b")?, p.get("c")?, p.get("d")?);
            // d(a·b)/da = r·bᵀ, d/db = aᵀ·r; a·cᵀ: d/da = r·c, d/dc = rᵀ·a; aᵀ·d: d/da = d·rᵀ, d/dd = a·r
            let da = matmul_nt(&r1, b)?.add(&matmul(&r2, c)?)?.add(&matmul_nt(d, &r3)?)?;
            let out = vec![
                ("a", da),
                ("b", matmul_tn(a, &r1)?),
                ("c", matmul_tn(&r2, a)?),
                ("d", matmul(a, &r3)?),
            ];
            Ok((f(p)?, grads(out)?))
        };
        check("matmul", seed, &p, f, g);
    }
}

#[test]
fn affine_layer() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        p.insert("x", rng.normal_tensor(&[4, 3], 1.0));
        p.insert("w", rng.normal_tensor(&[3, 5], 1.0));
        p.insert("b", rng.normal_tensor(&[5], 1.0));
        let r = probe(&mut rng, &[4, 5]);
        let f = |p: &ParamStore| -> Result<f64> { Ok(affine(p.get("x")?, p.get("w")?, p.get("b")?)?.dot(&r)?) };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let ag = affine_backward(p.get("x")?, p.get("w")?, &r)?;
            Ok((f(p)?, grads(vec![("x", ag.dx), ("w", ag.dw), ("b", ag.db)])?))
        };
        check("affine", seed, &p, f, g);
    }
}

#[test]
fn conv2d_strides() {
    for seed in 0..SEEDS {
        let stride = 1 + (seed % 2) as usize;
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        p.insert("x", rng.normal_tensor(&[6, 6, 2], 1.0));
        p.insert("k", rng.normal_tensor(&[2, 2, 2, 3], 1.0));
        p.insert("b", rng.normal_tensor(&[3], 1.0));
        let side = (6 - 2) / stride + 1;
        let r = probe(&mut rng, &[side, side, 3]);
        let f = |p: &ParamStore| -> Result<f64> { Ok(conv2d(p.get("x")?, p.get("k")?, stride, p.get("b")?)?.dot(&r)?) };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let cg = conv2d_backward(p.get("x")?, p.get("k")?, stride, &r)?;
            Ok((f(p)?, grads(vec![("x", cg.dx), ("k", cg.dkernel), ("b", cg.dbias)])?))
        };
        check("conv2d", seed, &p, f, g);
    }
}

#[test]
fn layer_norm_rows() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        p.insert("x", rng.normal_tensor(&[3, 6], 2.0));
        p.insert("gain", rng.normal_tensor(&[6], 1.0));
        p.insert("shift", rng.normal_tensor(&[6], 1.0));
        let r = probe(&mut rng, &[3, 6]);
        let f = |p: &ParamStore| -> Result<f64> {
            Ok(layer_norm(p.get("x")?, p.get("gain")?, p.get("shift")?, 1e-5)?.0.dot(&r)?)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (y, cache) = layer_norm(p.get("x")?, p.get("gain")?, p.get("shift")?, 1e-5)?;
            let lg = layer_norm_backward(&cache, p.get("gain")?, &r)?;
            Ok((y.dot(&r)?, grads(vec![("x", lg.dx), ("gain", lg.dgain), ("shift", lg.dshift)])?))
        };
        check("layer_norm", seed, &p, f, g);
    }
}

#[test]
fn softmax_and_gelu() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        p.insert("s", rng.normal_tensor(&[3, 5], 2.0));
        p.insert("g", rng.normal_tensor(&[4, 4], 2.0));
        let (rs, rg) = (probe(&mut rng, &[3, 5]), probe(&mut rng, &[4, 4]));
        let f = |p: &ParamStore| -> Result<f64> {
            Ok(softmax_rows(p.get("s")?)?.dot(&rs)? + gelu(p.get("g")?)?.dot(&rg)?)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let y = softmax_rows(p.get("s")?)?;
            let out = vec![("s", softmax_rows_backward(&y, &rs)?), ("g", gelu_backward(p.get("g")?, &rg)?)];
            Ok((f(p)?, grads(out)?))
        };
        check("softmax/gelu", seed, &p, f, g);
    }
}

#[test]
fn multi_head_attention() {
    for seed in 0..SEEDS {
        let causal = seed % 2 == 0;
        let mut rng = SeededRng::new(seed);
        let (n, m) = (4, if causal { 4 } else { 6 });
        let mut p = ParamStore::new();
        p.insert("q", rng.normal_tensor(&[n, 8], 1.0));
        p.insert("k", rng.normal_tensor(&[m, 8], 1.0));
        p.insert("v", rng.normal_tensor(&[m, 8], 1.0));
        let r = probe(&mut rng, &[n, 8]);
        let f = |p: &ParamStore| -> Result<f64> {
            Ok(attention(p.get("q")?, p.get("k")?, p.get("v")?, 2, causal)?.0.dot(&r)?)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (y, cache) = attention(p.get("q")?, p.get("k")?, p.get("v")?, 2, causal)?;
            let (dq, dk, dv) = attention_backward(&cache, &r)?;
            Ok((y.dot(&r)?, grads(vec![("q", dq), ("k", dk), ("v", dv)])?))
        };
        check("attention", seed, &p, f, g);
    }
}

#[test]
fn connector_path() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        let conn = Connector::init(&mut p, &mut rng, ConnectorConfig::new(8, 4, 6)).unwrap();
        p.insert("map", rng.normal_tensor(&[8, 8, 4], 1.0));
        let r = probe(&mut rng, &[4, 6]);
        let f = |p: &ParamStore| -> Result<f64> {
            let (h, _) = conn.connect(p, &FeatureMap::new(p.get("map")?.clone())?)?;
            Ok(h.tokens.dot(&r)?)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (h, cache) = conn.connect(p, &FeatureMap::new(p.get("map")?.clone())?)?;
            let mut g = Grads::new();
            let dmap = conn.backward(p, &cache, &r, &mut g)?;
            g.accumulate("map", dmap.reshape(&[8, 8, 4])?)?;
            Ok((h.tokens.dot(&r)?, g))
        };
        check("connector", seed, &p, f, g);
    }
}

fn small_lm() -> LmConfig {
    LmConfig {
        d: 8,
        vocab: 10,
        blocks: 2,
        heads: 2,
        mlp_width: 12,
        max_positions: 8,
        lora_rank: 2,
        lora_alpha: 4.0,
    }
}

#[test]
fn language_model_with_adapters() {
    let started = Instant::now();
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        let lm = LanguageModel::init(&mut p, &mut rng, small_lm()).unwrap();
        // non-zero adapters so both factors receive gradient
        for id in lm.adapter_ids() {
            let shape = p.get(&id).unwrap().shape().to_vec();
            p.insert(id, rng.normal_tensor(&shape, 0.3));
        }
        p.insert("x", rng.normal_tensor(&[5, 8], 1.0));
        let r = probe(&mut rng, &[5, 8]);
        let f = |p: &ParamStore| -> Result<f64> { Ok(lm.forward(p, p.get("x")?)?.0.dot(&r)?) };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (h, cache) = lm.forward(p, p.get("x")?)?;
            let mut g = Grads::new();
            let dx = lm.backward(p, &cache, &r, &mut g)?;
            g.accumulate("x", dx)?;
            Ok((h.dot(&r)?, g))
        };
        // the token table is not read by forward, which takes embedded rows
        let cfg = FdConfig {
            seed,
            only: Some(p.ids().filter(|id| id.as_str() != "lm.embed").cloned().collect()),
            ..FdConfig::default()
        };
        let report = finite_diff_check(f, g, &p, &cfg).unwrap();
        assert!(report.max_rel_error < TOL, "lm seed {seed}: {report:?}");
    }
    assert!(started.elapsed().as_secs() < 120, "{:?}", started.elapsed());
}

/// Row-normalises `u` and returns the unit rows and norms.
fn unit_rows(u: &Tensor) -> (Tensor, Vec<f64>) {
    let (b, d) = u.dims2().unwrap();
    let mut out = Vec::with_capacity(b * d);
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let n = u.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(u.row(i).iter().map(|v| v / n));
        norms.push(n);
    }
    (Tensor::new(vec![b, d], out).unwrap(), norms)
}

/// Chain rule through `z = u / ‖u‖`.
fn unit_rows_backward(z: &Tensor, norms: &[f64], dz: &Tensor) -> Tensor {
    let (b, d) = z.dims2().unwrap();
    let mut du = Vec::with_capacity(b * d);
    for i in 0..b {
        let dot: f64 = z.row(i).iter().zip(dz.row(i)).map(|(a, g)| a * g).sum();
        du.extend(z.row(i).iter().zip(dz.row(i)).map(|(zv, g)| (g - zv * dot) / norms[i]));
    }
    Tensor::new(vec![b, d], du).unwrap()
}

#[test]
fn contrastive_loss() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        p.insert("uq", rng.normal_tensor(&[6, 5], 1.0));
        p.insert("ut", rng.normal_tensor(&[6, 5], 1.0));
        // moderate temperature keeps central differences well conditioned
        let tau = 0.5;
        let f = |p: &ParamStore| -> Result<f64> {
            let (zq, _) = unit_rows(p.get("uq")?);
            let (zt, _) = unit_rows(p.get("ut")?);
            Ok(info_nce(&zq, &zt, tau)?.loss)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (zq, nq) = unit_rows(p.get("uq")?);
            let (zt, nt) = unit_rows(p.get("ut")?);
            let out = info_nce(&zq, &zt, tau)?;
            let g = grads(vec![("uq", unit_rows_backward(&zq, &nq, &out.dq)), ("ut", unit_rows_backward(&zt, &nt, &out.dt))])?;
            Ok((out.loss, g))
        };
        check("info_nce", seed, &p, f, g);
    }
}

#[test]
fn contrastive_loss_at_training_temperature() {
    for seed in 0..SEEDS {
        let mut rng = SeededRng::new(seed + 1000);
        let mut p = ParamStore::new();
        p.insert("uq", rng.normal_tensor(&[4, 6], 1.0));
        p.insert("ut", rng.normal_tensor(&[4, 6], 1.0));
        let f = |p: &ParamStore| -> Result<f64> {
            Ok(info_nce(&unit_rows(p.get("uq")?).0, &unit_rows(p.get("ut")?).0, 0.02)?.loss)
        };
        let g = |p: &ParamStore| -> Result<(f64, Grads)> {
            let (zq, nq) = unit_rows(p.get("uq")?);
            let (zt, nt) = unit_rows(p.get("ut")?);
            let out = info_nce(&zq, &zt, 0.02)?;
            let g = grads(vec![("uq", unit_rows_backward(&zq, &nq, &out.dq)), ("ut", unit_rows_backward(&zt, &nt, &out.dt))])?;
            Ok((out.loss, g))
        };
        let cfg = FdConfig { step: 1e-6, seed, ..FdConfig::default() };
        let report = finite_diff_check(f, g, &p, &cfg).unwrap();
        assert!(report.max_rel_error < TOL, "info_nce τ=0.02 seed {seed}: {report:?}");
    }
}
