//! Checkpoint directories: `manifest.json`, `params.vtsr` (one record per
//! parameter in manifest order) and, when training state is saved,
//! `optimizer.json` plus `optimizer.vtsr`.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{Model, ModelConfig};
use crate::encoders::Vocab;
use crate::error::{Error, Result};
use crate::numkernel::snapshot::{read_tensor, write_tensor};
use crate::numkernel::{DType, ParamStore, Tensor};
use crate::trainer::{AdamWState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub id: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub fingerprint: String,
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub seed: u64,
    pub frozen: Vec<String>,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerManifest {
    step: u64,
    ids: Vec<String>,
}

/// Model structure, parameters and optional optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: Option<AdamWState>,
    pub train: Option<TrainConfig>,
}

fn write_records(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<Tensor>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut out = Vec::new();
    while let Some(t) = read_tensor(&mut r)? {
        out.push(t);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = self.model.config();
        let trainable = self.model.trainable_ids(&self.params);
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            fingerprint: self.params.fingerprint(),
            d: cfg.lm.d,
            blocks: cfg.lm.blocks,
            heads: cfg.lm.heads,
            lora_rank: cfg.lm.lora_rank,
            lora_alpha: cfg.lm.lora_alpha,
            seed: cfg.seed,
            frozen: self.params.ids().filter(|id| !trainable.contains(*id)).cloned().collect(),
            model: *cfg,
            vocab: self.model.vocab().clone(),
            tensors: self
                .params
                .iter()
                .map(|(id, t)| TensorEntry {
                    id: id.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            train: self.train.clone(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        let tensors: Vec<&Tensor> = self.params.iter().map(|(_, t)| t).collect();
        write_records(&dir.join("params.vtsr"), &tensors)?;
        if let Some(opt) = &self.optimizer {
            let ids: Vec<String> = opt.m.keys().cloned().collect();
            let mut records = Vec::with_capacity(ids.len() * 2);
            for id in &ids {
                for moments in [&opt.m[id], &opt.v[id]] {
                    records.push(Tensor::with_dtype(vec![moments.len()], moments.clone(), DType::F64)?);
                }
            }
            let om = OptimizerManifest { step: opt.step, ids };
            let path = dir.join("optimizer.json");
            fs::write(&path, serde_json::to_vec_pretty(&om)?).map_err(|e| Error::io(&path, e))?;
            write_records(&dir.join("optimizer.vtsr"), &records.iter().collect::<Vec<_>>())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let records = read_records(&dir.join("params.vtsr"))?;
        if records.len() != manifest.tensors.len() {
            return Err(Error::Integrity(format!(
                "manifest lists {} tensors, file holds {}",
                manifest.tensors.len(),
                records.len()
            )));
        }
        let mut params = ParamStore::new();
        for (entry, t) in manifest.tensors.iter().zip(records) {
            if entry.shape != t.shape() {
                return Err(Error::Integrity(format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.id,
                    t.shape(),
                    entry.shape
                )));
            }
            params.insert(entry.id.clone(), t);
        }
        if params.fingerprint() != manifest.fingerprint {
            return Err(Error::Integrity("parameter fingerprint mismatch".into()));
        }
        let has_adapters = params.ids().any(|id| id.ends_with(".lora_a"));
        let model = Model::new(manifest.model, manifest.vocab, has_adapters)?;
        let opt_path = dir.join("optimizer.json");
        let optimizer = if opt_path.exists() {
            let om: OptimizerManifest =
                serde_json::from_slice(&fs::read(&opt_path).map_err(|e| Error::io(&opt_path, e))?)?;
            let recs = read_records(&dir.join("optimizer.vtsr"))?;
            if recs.len() != om.ids.len() * 2 {
                return Err(Error::Integrity("optimizer state is incomplete".into()));
            }
            let mut st = AdamWState {
                step: om.step,
                ..AdamWState::default()
            };
            for (i, id) in om.ids.iter().enumerate() {
                st.m.insert(id.clone(), recs[2 * i].data().to_vec());
                st.v.insert(id.clone(), recs[2 * i + 1].data().to_vec());
            }
            Some(st)
        } else {
            None
        };
        Ok(Checkpoint {
            model,
            params,
            optimizer,
            train: manifest.train,
        })
    }

    /// Ids recorded as frozen in a saved manifest.
    pub fn frozen_ids(&self) -> BTreeSet<String> {
        let trainable = self.model.trainable_ids(&self.params);
        self.params.ids().filter(|id| !trainable.contains(*id)).cloned().collect()
    }
}
