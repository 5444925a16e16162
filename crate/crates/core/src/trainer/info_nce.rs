use crate::error::{Error, Result};
use crate::numkernel::{matmul, matmul_nt, matmul_tn, Tensor};

/// Row-norm tolerance for the unit-vector precondition; loose enough for
/// single-precision embeddings.
const UNIT_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    /// Per-sample `−log p(i | i)`.
    pub per_sample: Vec<f64>,
    pub dq: Tensor,
    pub dt: Tensor,
}

/// One-directional InfoNCE over in-batch negatives: sample `i` contrasts
/// its own target against the other `B − 1` targets at temperature `tau`.
pub fn info_nce(zq: &Tensor, zt: &Tensor, tau: f64) -> Result<InfoNceOutput> {
    let (b, d) = zq.dims2()?;
    if zt.dims2()? != (b, d) {
        return Err(crate::numkernel::KernelError::Dimension(format!(
            "query block {:?} and target block {:?} differ",
            zq.shape(),
            zt.shape()
        ))
        .into());
    }
    if b < 2 {
        return Err(Error::Config(format!("in-batch contrast needs B ≥ 2, got {b}")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    for (name, z) in [("query", zq), ("target", zt)] {
        for i in 0..b {
            let n = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(Error::Contract(format!("{name} row {i} has norm {n}, expected 1")));
            }
        }
    }
    let sims = matmul_nt(zq, zt)?;
    let mut per_sample = Vec::with_capacity(b);
    let mut ds = vec![0.0; b * b];
    for i in 0..b {
        let row: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        per_sample.push(lse - row[i]);
        for j in 0..b {
            let p = (row[j] - lse).exp();
            ds[i * b + j] = (p - if i == j { 1.0 } else { 0.0 }) / (b as f64 * tau);
        }
    }
    let loss = per_sample.iter().sum::<f64>() / b as f64;
    let ds = Tensor::new(vec![b, b], ds)?;
    Ok(InfoNceOutput {
        loss,
        per_sample,
        dq: matmul(&ds, zt)?,
        dt: matmul_tn(&ds, zq)?,
    })
}
