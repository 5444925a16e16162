//! Scaled dot-product multi-head attention over row-major token matrices.

use super::ops::{matmul, matmul_nt, matmul_tn};
use super::{KernelError, Result, Tensor};

#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    heads: usize,
}

fn split_head(x: &Tensor, h: usize, dh: usize) -> Tensor {
    let (n, d) = x.dims2().expect("matrix");
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x.data()[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    Tensor::new(vec![n, dh], out).expect("finite")
}

fn merge_head(dst: &mut [f64], part: &Tensor, h: usize, d: usize) {
    let (n, dh) = part.dims2().expect("matrix");
    for i in 0..n {
        dst[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(part.row(i));
    }
}

/// `softmax(q kᵀ / √d_h) v` per head. With `causal`, query `i` sees keys
/// `0..=i` only (requires equal query and key counts).
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, AttentionCache)> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if dk != d || dv != d || mv != m || heads == 0 || d % heads != 0 {
        return Err(KernelError::Dimension(format!(
            "attention: q {:?}, k {:?}, v {:?}, heads {heads}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if causal && n != m {
        return Err(KernelError::Dimension(format!(
            "causal attention needs square scores, got {n}×{m}"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = split_head(q, h, dh);
        let kh = split_head(k, h, dh);
        let vh = split_head(v, h, dh);
        let scores = matmul_nt(&qh, &kh)?;
        let mut p = vec![0.0; n * m];
        for i in 0..n {
            let visible = if causal { i + 1 } else { m };
            let row = scores.row(i);
            let max = row[..visible]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..visible {
                let e = ((row[j] - max) * scale).exp();
                p[i * m + j] = e;
                z += e;
            }
            for v in &mut p[i * m..i * m + visible] {
                *v /= z;
            }
        }
        let p = Tensor::new(vec![n, m], p)?;
        let oh = matmul(&p, &vh)?;
        merge_head(&mut out, &oh, h, d);
        probs.push(p);
    }
    let dtype = q.dtype().join(k.dtype()).join(v.dtype());
    Ok((
        Tensor::with_dtype(vec![n, d], out, dtype)?,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            probs,
            heads,
        },
    ))
}

/// Gradients w.r.t. `(q, k, v)`.
pub fn attention_backward(
    cache: &AttentionCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = cache.q.dims2()?;
    let (m, _) = cache.k.dims2()?;
    dout.check_same_shape(&cache.q, "attention backward")?;
    let heads = cache.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; n * d];
    let mut dk = vec![0.0; m * d];
    let mut dv = vec![0.0; m * d];
    for h in 0..heads {
        let qh = split_head(&cache.q, h, dh);
        let kh = split_head(&cache.k, h, dh);
        let vh = split_head(&cache.v, h, dh);
        let doh = split_head(dout, h, dh);
        let p = &cache.probs[h];
        let dvh = matmul_tn(p, &doh)?;
        let dp = matmul_nt(&doh, &vh)?;
        // softmax backward, folded with the 1/√d_h score scale
        let mut ds = vec![0.0; n * m];
        for i in 0..n {
            let pr = p.row(i);
            let gr = dp.row(i);
            let s: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for j in 0..m {
                ds[i * m + j] = pr[j] * (gr[j] - s) * scale;
            }
        }
        let ds = Tensor::new(vec![n, m], ds)?;
        let dqh = matmul(&ds, &kh)?;
        let dkh = matmul_tn(&ds, &qh)?;
        merge_head(&mut dq, &dqh, h, d);
        merge_head(&mut dk, &dkh, h, d);
        merge_head(&mut dv, &dvh, h, d);
    }
    let dtype = dout.dtype().join(cache.q.dtype());
    Ok((
        Tensor::with_dtype(vec![n, d], dq, dtype)?,
        Tensor::with_dtype(vec![m, d], dk, dtype)?,
        Tensor::with_dtype(vec![m, d], dv, dtype)?,
    ))
}

impl AttentionCache {
    /// Attention weights of one head, `n×m`.
    pub fn probs(&self, head: usize) -> &Tensor {
        &self.probs[head]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::rng::SeededRng;

    #[test]
    fn rows_of_weights_sum_to_one_and_respect_mask() {
        let mut rng = SeededRng::new(1);
        let x = rng.normal_tensor(&[5, 8], 1.0);
        let (_, cache) = attention(&x, &x, &x, 2, true).unwrap();
        for h in 0..2 {
            let p = cache.probs(h);
            for i in 0..5 {
                let row = p.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[i + 1..].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn single_key_passes_value_through() {
        let mut rng = SeededRng::new(2);
        let q = rng.normal_tensor(&[4, 4], 1.0);
        let kv = rng.normal_tensor(&[1, 4], 1.0);
        let (out, _) = attention(&q, &kv, &kv, 2, false).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), kv.row(0));
        }
    }
}
