//! Command implementations shared by the binary and the tests.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use virtue_core::checkpoint::Checkpoint;
use virtue_core::embedder::{EmbedInput, Model, ModelConfig};
use virtue_core::retrieval::{
    precision_at_1, EmbeddingIndex, IndexEntry, ModelScorer, OracleScorer, PrecisionReport, RandomScorer, Scorer,
};
use virtue_core::synth::{self, SynthSource};
use virtue_core::trainer::{train, PairSource, RunDir, StepLog, TrainConfig};

use crate::data::{load_items, read_split, split_vocab, SplitSource};

/// Training run description. `train` holds overrides applied on top of the
/// desk defaults; without `split` the synthetic corpus is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub split: Option<PathBuf>,
    #[serde(default)]
    pub train: serde_json::Map<String, serde_json::Value>,
}

impl RunConfig {
    /// Reads a TOML or JSON file, chosen by extension.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        if let Some(dir) = path.parent() {
            cfg.out = dir.join(&cfg.out);
            cfg.split = cfg.split.map(|s| dir.join(s));
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut base = serde_json::to_value(TrainConfig::desk())?;
        let obj = base.as_object_mut().expect("config serializes to an object");
        for (k, v) in &self.train {
            if !obj.contains_key(k) {
                bail!("unknown training option {k:?}");
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: TrainConfig = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const FINAL_CHECKPOINT: &str = "final";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub struct RunSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<StepLog>,
}

/// Trains from scratch or from the checkpoint in `resume`, then writes
/// `<out>/final`.
pub fn train_run(cfg: &RunConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let tc = cfg.train_config()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let (model, params, state) = match resume {
        Some(dir) => {
            let ck = Checkpoint::load(dir)?;
            let state = ck.optimizer.context("checkpoint has no optimizer state to resume")?;
            (ck.model, ck.params, Some(state))
        }
        None => {
            let vocab = match &cfg.split {
                Some(s) => split_vocab(&read_split(s)?),
                None => synth::vocab(),
            };
            let (model, params) = Model::init(ModelConfig::desk(vocab.len(), cfg.model_seed), vocab)?;
            (model, params, None)
        }
    };
    let source: Box<dyn PairSource> = match &cfg.split {
        Some(s) => Box::new(SplitSource::load(s)?),
        None => Box::new(SynthSource),
    };
    let run = RunDir {
        metrics: Some(cfg.out.join(METRICS_FILE)),
        checkpoints: Some(cfg.out.join("checkpoints")),
    };
    let out = train(&model, params, source.as_ref(), &tc, state, &run)?;
    let dir = cfg.out.join(FINAL_CHECKPOINT);
    Checkpoint {
        model,
        params: out.params,
        optimizer: Some(out.optimizer),
        train: Some(tc),
    }
    .save(&dir)?;
    Ok(RunSummary {
        checkpoint: dir,
        log: out.log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScorerKind {
    Model,
    Oracle,
    Random,
}

/// precision@1 over a stored split. Samples that could not be loaded are
/// reported as errors.
pub fn eval_split(
    split_file: &Path,
    checkpoint: Option<&Path>,
    scorer: ScorerKind,
    seed: u64,
) -> Result<PrecisionReport> {
    let (items, load_errors) = load_items(split_file)?;
    let ck = match checkpoint {
        Some(dir) => Some(Checkpoint::load(dir)?),
        None => None,
    };
    let dim = ck.as_ref().map(|c| c.model.config().lm.d).unwrap_or(64);
    let model_scorer;
    let oracle = OracleScorer { dim };
    let random = RandomScorer { dim, seed };
    let s: &dyn Scorer = match scorer {
        ScorerKind::Model => {
            let ck = ck.as_ref().context("model scoring needs --checkpoint")?;
            model_scorer = ModelScorer {
                model: &ck.model,
                params: &ck.params,
            };
            &model_scorer
        }
        ScorerKind::Oracle => &oracle,
        ScorerKind::Random => &random,
    };
    let mut report = precision_at_1(&items, s, seed);
    report.errors.extend(load_errors);
    Ok(report)
}

/// Index over every distinct candidate caption of a split, ids in caption
/// order.
pub fn build_index(ck: &Checkpoint, split_file: &Path) -> Result<EmbeddingIndex> {
    let texts: BTreeSet<String> = read_split(split_file)?
        .iter()
        .flat_map(|s| s.candidates().into_iter().map(|c| c.text))
        .collect();
    let mut index = EmbeddingIndex::new(&ck.params.fingerprint(), ck.model.config().lm.d);
    for (i, text) in texts.into_iter().enumerate() {
        let z = ck.model.embed(&ck.params, &EmbedInput::caption(&text))?;
        let entry = IndexEntry {
            id: format!("caption-{i:06}"),
            payload: serde_json::json!({ "text": text }),
        };
        index.push(entry, z)?;
    }
    Ok(index)
}
