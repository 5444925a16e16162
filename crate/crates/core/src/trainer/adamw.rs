use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Grads, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Decoupled-weight-decay Adam with bias correction. Parameters without a
/// gradient entry are left untouched.
pub fn adamw_update(
    params: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("{id} (element {i})")));
        }
        let p = params.get(id)?;
        if p.shape() != g.shape() {
            return Err(crate::numkernel::KernelError::Dimension(format!(
                "gradient {:?} does not match parameter {id} {:?}",
                g.shape(),
                p.shape()
            ))
            .into());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let p = params.get(id)?;
        let m = state.m.entry(id.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(id.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let mut out = Vec::with_capacity(p.len());
        for (k, (&w, &gk)) in p.data().iter().zip(g.data()).enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            out.push(w - lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w));
        }
        let updated = Tensor::with_dtype(p.shape().to_vec(), out, p.dtype())?;
        params.insert(id.clone(), updated);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> (ParamStore, Grads) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(vec![1.0]));
        let mut g = Grads::new();
        g.accumulate("w", Tensor::vector(vec![v])).unwrap();
        (p, g)
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let (mut p, g) = scalar(0.0);
        let mut s = AdamWState::default();
        adamw_update(&mut p, &g, &mut s, 0.1, &AdamWConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let (mut p, g) = scalar(0.3);
        let mut s = AdamWState::default();
        let mut prev = 1.0;
        for _ in 0..200 {
            adamw_update(&mut p, &g, &mut s, 1e-3, &AdamWConfig::default()).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(((prev - now) - 1e-3).abs() < 1e-7);
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut p, mut g) = scalar(0.0);
        for (_, t) in g.iter_mut() {
            t.data_mut()[0] = f64::NAN;
        }
        let err = adamw_update(&mut p, &g, &mut AdamWState::default(), 0.1, &AdamWConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteGradient(id)) if id.starts_with('w')));
    }
}
