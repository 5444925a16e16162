//! Persistent embedding index: `index.vtsr` holds an `n×d` single-precision
//! block and `index.jsonl` a header line followed by one entry per row.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::rank;
use crate::embedder::UnitEmbedding;
use crate::error::{Error, Result};
use crate::numkernel::snapshot;
use crate::numkernel::{DType, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    #[serde(default)]
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    dim: usize,
    count: usize,
}

#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    fingerprint: String,
    dim: usize,
    entries: Vec<IndexEntry>,
    vectors: Vec<UnitEmbedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHit {
    pub id: String,
    pub score: f64,
    pub payload: serde_json::Value,
}

impl EmbeddingIndex {
    pub fn new(fingerprint: &str, dim: usize) -> EmbeddingIndex {
        EmbeddingIndex {
            fingerprint: fingerprint.to_string(),
            dim,
            entries: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: IndexEntry, v: UnitEmbedding) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::Validation(format!(
                "vector of width {} in an index of width {}",
                v.dim(),
                self.dim
            )));
        }
        self.entries.push(entry);
        self.vectors.push(v);
        Ok(())
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn vectors(&self) -> &[UnitEmbedding] {
        &self.vectors
    }

    /// Fails unless the index was built by the model identified by
    /// `model_fingerprint`.
    pub fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.fingerprint != model_fingerprint {
            return Err(Error::StaleIndex {
                index: self.fingerprint.clone(),
                model: model_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Top `k` entries by cosine to `query`, ties broken by insertion order.
    pub fn search(&self, query: &UnitEmbedding, k: usize, model_fingerprint: &str) -> Result<Vec<IndexHit>> {
        self.check_fingerprint(model_fingerprint)?;
        Ok(rank(query, &self.vectors)?
            .into_iter()
            .take(k)
            .map(|(i, score)| IndexHit {
                id: self.entries[i].id.clone(),
                score,
                payload: self.entries[i].payload.clone(),
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data = self.vectors.iter().flat_map(|v| v.values().iter().copied()).collect();
        let block = Tensor::with_dtype(vec![self.len(), self.dim], data, DType::F32)?;
        snapshot::save(&dir.join("index.vtsr"), &[&block])?;
        let path = dir.join("index.jsonl");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(f);
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            dim: self.dim,
            count: self.len(),
        };
        let mut line = serde_json::to_string(&header)?;
        for e in &self.entries {
            line.push('\n');
            line.push_str(&serde_json::to_string(e)?);
        }
        line.push('\n');
        w.write_all(line.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<EmbeddingIndex> {
        let path = dir.join("index.jsonl");
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Integrity("index manifest is empty".into()))?
            .map_err(|e| Error::io(&path, e))?;
        let header: Header = serde_json::from_str(&first)?;
        let mut entries = Vec::with_capacity(header.count);
        for line in lines {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if !line.trim().is_empty() {
                entries.push(serde_json::from_str(&line)?);
            }
        }
        let blocks = snapshot::load(&dir.join("index.vtsr"))?;
        let block = match blocks.as_slice() {
            [b] => b,
            _ => return Err(Error::Integrity("index.vtsr must hold exactly one block".into())),
        };
        if block.shape() != [header.count, header.dim] || entries.len() != header.count {
            return Err(Error::Integrity(format!(
                "index holds {:?} vectors for {} entries, header says {}×{}",
                block.shape(),
                entries.len(),
                header.count,
                header.dim
            )));
        }
        let vectors = (0..header.count)
            .map(|i| UnitEmbedding::normalize(&Tensor::vector(block.row(i).to_vec())))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmbeddingIndex {
            fingerprint: header.fingerprint,
            dim: header.dim,
            entries,
            vectors,
        })
    }
}
