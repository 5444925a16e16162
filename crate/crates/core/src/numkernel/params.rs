use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{DType, KernelError, Result, Tensor};

/// Named parameter tensors, ordered by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(id.into(), tensor);
    }

    pub fn get(&self, id: &str) -> Result<&Tensor> {
        self.tensors
            .get(id)
            .ok_or_else(|| KernelError::MissingParam(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(id)
            .ok_or_else(|| KernelError::MissingParam(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.tensors.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast(&self, dtype: DType) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast(dtype)))
                .collect(),
        }
    }

    /// SHA-256 over ids, shapes and values; identifies a model state.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (id, t) in &self.tensors {
            h.update(id.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradients keyed by parameter id. An optional filter restricts which ids
/// are accumulated so frozen parameters cost nothing.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
    filter: Option<Arc<BTreeSet<String>>>,
}

impl Grads {
    pub fn new() -> Grads {
        Grads::default()
    }

    pub fn restricted(ids: Arc<BTreeSet<String>>) -> Grads {
        Grads {
            map: BTreeMap::new(),
            filter: Some(ids),
        }
    }

    /// An empty accumulator sharing this one's filter.
    pub fn empty_like(&self) -> Grads {
        Grads {
            map: BTreeMap::new(),
            filter: self.filter.clone(),
        }
    }

    pub fn wants(&self, id: &str) -> bool {
        self.filter.as_ref().is_none_or(|f| f.contains(id))
    }

    pub fn accumulate(&mut self, id: &str, grad: Tensor) -> Result<()> {
        if !self.wants(id) {
            return Ok(());
        }
        match self.map.get_mut(id) {
            Some(g) => g.add_assign(&grad),
            None => {
                self.map.insert(id.to_string(), grad);
                Ok(())
            }
        }
    }

    pub fn merge(&mut self, other: &Grads) -> Result<()> {
        for (id, g) in &other.map {
            self.accumulate(id, g.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.map.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    /// Checks every gradient has its parameter's shape.
    pub fn check_shapes(&self, params: &ParamStore) -> Result<()> {
        for (id, g) in &self.map {
            let p = params.get(id)?;
            if p.shape() != g.shape() {
                return Err(KernelError::Dimension(format!(
                    "gradient for {id} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    /// Largest elementwise difference over the union of ids; a missing
    /// entry counts as zeros.
    pub fn max_abs_diff(&self, other: &Grads) -> f64 {
        let ids: BTreeSet<&String> = self.map.keys().chain(other.map.keys()).collect();
        let mut worst: f64 = 0.0;
        for id in ids {
            let d = match (self.map.get(id), other.map.get(id)) {
                (Some(a), Some(b)) => a.max_abs_diff(b).unwrap_or(f64::INFINITY),
                (Some(a), None) | (None, Some(a)) => {
                    a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))
                }
                (None, None) => 0.0,
            };
            worst = worst.max(d);
        }
        worst
    }
}

/// A value together with gradients of a scalar objective w.r.t. parameters.
#[derive(Debug, Clone)]
pub struct GradPair {
    pub value: Tensor,
    pub grads: Grads,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_skips_frozen() {
        let keep: BTreeSet<String> = ["a".to_string()].into_iter().collect();
        let mut g = Grads::restricted(Arc::new(keep));
        g.accumulate("a", Tensor::full(&[2], 1.0)).unwrap();
        g.accumulate("b", Tensor::full(&[2], 1.0)).unwrap();
        g.accumulate("a", Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get("a").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_check_catches_mismatch() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[2, 2]));
        let mut g = Grads::new();
        g.accumulate("w", Tensor::zeros(&[4])).unwrap();
        assert!(g.check_shapes(&p).is_err());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[2]));
        let f0 = p.fingerprint();
        p.get_mut("w").unwrap().data_mut()[0] = 1e-9;
        assert_ne!(f0, p.fingerprint());
    }
}
