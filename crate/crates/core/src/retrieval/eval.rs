//! Cosine ranking, precision@1 and calibration harnesses.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sample::{Candidate, ScarSample};
use crate::embedder::{EmbedInput, Model, Side, TaskInstruction, UnitEmbedding};
use crate::encoders::{Bbox, Image, VisualPrompt};
use crate::error::{Error, Result};
use crate::numkernel::{ParamStore, SeededRng};

pub const CANDIDATES_PER_SAMPLE: usize = 10;

/// `[x_min, y_min, width, height]` with two decimals and a `.` separator.
pub fn format_bbox(b: &Bbox) -> Result<String> {
    let v = [b.x_min, b.y_min, b.width, b.height];
    if v.iter().any(|x| !x.is_finite()) || b.width <= 0.0 || b.height <= 0.0 {
        return Err(Error::Validation(format!(
            "cannot textualize bbox {v:?}: needs finite values and positive area"
        )));
    }
    Ok(format!("[{:.2}, {:.2}, {:.2}, {:.2}]", v[0], v[1], v[2], v[3]))
}

/// `Referring object bbox: [x_min, y_min, w, h]` in absolute pixels.
pub fn textualize_bbox(b: &Bbox) -> Result<String> {
    Ok(format!("Referring object bbox: {}", format_bbox(b)?))
}

/// Indices sorted by descending cosine; equal scores keep the lower index
/// first.
pub fn rank(query: &UnitEmbedding, candidates: &[UnitEmbedding]) -> Result<Vec<(usize, f64)>> {
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| Ok((i, query.cosine(c)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

/// One evaluation query with its candidate captions.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub id: String,
    pub dataset: String,
    pub image: Arc<Image>,
    /// Absolute pixel box, textualized into the instruction.
    pub bbox: Bbox,
    /// Visual prompt; `None` uses the box itself.
    pub prompt: Option<VisualPrompt>,
    pub candidates: Vec<Candidate>,
    pub tags: Vec<String>,
}

impl EvalItem {
    /// Box-prompted item for a validated record and its decoded image.
    pub fn from_sample(sample: &ScarSample, image: Arc<Image>) -> Result<EvalItem> {
        sample.validate()?;
        let size = (sample.image_size.width as usize, sample.image_size.height as usize);
        if size != (image.width(), image.height()) {
            return Err(Error::Validation(format!(
                "record {} declares a {}×{} image, file is {}×{}",
                sample.id,
                size.0,
                size.1,
                image.width(),
                image.height()
            )));
        }
        Ok(EvalItem {
            id: sample.id.clone(),
            dataset: sample.dataset.clone(),
            image,
            bbox: sample.bbox(),
            prompt: None,
            candidates: sample.candidates(),
            tags: Vec::new(),
        })
    }

    pub fn gt_text(&self) -> Option<&str> {
        let mut gts = self.candidates.iter().filter(|c| c.is_gt);
        match (gts.next(), gts.next()) {
            (Some(c), None) => Some(&c.text),
            _ => None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.candidates.len() != CANDIDATES_PER_SAMPLE {
            return Err(Error::Validation(format!(
                "expected {CANDIDATES_PER_SAMPLE} candidates, got {}",
                self.candidates.len()
            )));
        }
        if self.gt_text().is_none() {
            return Err(Error::Validation("exactly one candidate must be flagged as ground truth".into()));
        }
        Ok(())
    }

    /// Normalised box prompt matching [`bbox`](Self::bbox).
    pub fn box_prompt(&self) -> VisualPrompt {
        let [x, y, w, h] = self
            .bbox
            .normalized(self.image.width() as f64, self.image.height() as f64);
        VisualPrompt::boxed(x, y, w, h)
    }

    /// Query embedding input under the region-caption instruction.
    pub fn query_input(&self) -> Result<EmbedInput> {
        Ok(EmbedInput {
            side: Side::Query,
            image: Some(Arc::clone(&self.image)),
            prompt: Some(self.prompt.clone().unwrap_or_else(|| self.box_prompt())),
            instruction: TaskInstruction::scar(),
            bbox_text: Some(format_bbox(&self.bbox)?),
            text: None,
        })
    }
}

/// Anything that maps queries and captions to unit vectors.
pub trait Scorer {
    fn fingerprint(&self) -> String;
    fn embed_query(&self, item: &EvalItem) -> Result<UnitEmbedding>;
    fn embed_candidate(&self, text: &str) -> Result<UnitEmbedding>;
}

pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore,
}

impl Scorer for ModelScorer<'_> {
    fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn embed_query(&self, item: &EvalItem) -> Result<UnitEmbedding> {
        self.model.embed(self.params, &item.query_input()?)
    }

    fn embed_candidate(&self, text: &str) -> Result<UnitEmbedding> {
        self.model.embed(self.params, &EmbedInput::caption(text))
    }
}

/// Deterministic pseudo-random unit vector keyed by `label`.
pub fn hash_embedding(label: &str, dim: usize, seed: u64) -> UnitEmbedding {
    let mut rng = SeededRng::derive(seed, label);
    loop {
        let v = rng.normal_tensor(&[dim], 1.0);
        if let Ok(z) = UnitEmbedding::normalize(&v) {
            return z;
        }
    }
}

/// Upper-bound harness: the query is the ground-truth caption's embedding.
pub struct OracleScorer {
    pub dim: usize,
}

impl Scorer for OracleScorer {
    fn fingerprint(&self) -> String {
        "oracle".into()
    }

    fn embed_query(&self, item: &EvalItem) -> Result<UnitEmbedding> {
        let gt = item
            .gt_text()
            .ok_or_else(|| Error::Validation("no ground truth".into()))?;
        Ok(hash_embedding(gt, self.dim, 0))
    }

    fn embed_candidate(&self, text: &str) -> Result<UnitEmbedding> {
        Ok(hash_embedding(text, self.dim, 0))
    }
}

/// Independent random vectors for every query and caption.
pub struct RandomScorer {
    pub dim: usize,
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn fingerprint(&self) -> String {
        format!("random-{}", self.seed)
    }

    fn embed_query(&self, item: &EvalItem) -> Result<UnitEmbedding> {
        Ok(hash_embedding(&format!("query:{}", item.id), self.dim, self.seed))
    }

    fn embed_candidate(&self, text: &str) -> Result<UnitEmbedding> {
        Ok(hash_embedding(&format!("candidate:{text}"), self.dim, self.seed))
    }
}

/// Adversarial harness: one fixed vector for everything.
pub struct ConstantScorer {
    pub dim: usize,
}

impl Scorer for ConstantScorer {
    fn fingerprint(&self) -> String {
        "constant".into()
    }

    fn embed_query(&self, _: &EvalItem) -> Result<UnitEmbedding> {
        Ok(hash_embedding("constant", self.dim, 0))
    }

    fn embed_candidate(&self, _: &str) -> Result<UnitEmbedding> {
        Ok(hash_embedding("constant", self.dim, 0))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub correct: usize,
    pub total: usize,
    pub precision: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub datasets: BTreeMap<String, DatasetScore>,
    /// Over all scored samples.
    pub overall: f64,
    /// Unweighted mean of the per-dataset precisions.
    pub dataset_mean: f64,
    pub scored: usize,
    /// Samples excluded as malformed, with the reason.
    pub errors: Vec<(String, String)>,
}

impl PrecisionReport {
    /// Fixed-width table with one column per dataset plus the overall score.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut row = String::new();
        for (name, s) in &self.datasets {
            let w = name.len().max(8);
            head.push_str(&format!("{name:>w$} "));
            row.push_str(&format!("{:>w$.1} ", 100.0 * s.precision));
        }
        head.push_str(&format!("{:>8}", "Overall"));
        row.push_str(&format!("{:>8.1}", 100.0 * self.overall));
        format!("{head}\n{row}\n")
    }
}

/// Fraction of items whose top-ranked candidate is the flagged ground
/// truth. Candidate order is shuffled per item (seeded by `seed` and the
/// item id) before ranking so stored order cannot leak the answer through
/// tie-breaking.
pub fn precision_at_1(items: &[EvalItem], scorer: &dyn Scorer, seed: u64) -> PrecisionReport {
    let mut report = PrecisionReport::default();
    let mut cache: HashMap<String, UnitEmbedding> = HashMap::new();
    for item in items {
        match score_item(item, scorer, seed, &mut cache) {
            Ok(hit) => {
                let s = report.datasets.entry(item.dataset.clone()).or_default();
                s.total += 1;
                s.correct += usize::from(hit);
                report.scored += 1;
            }
            Err(e) => report.errors.push((item.id.clone(), e.to_string())),
        }
    }
    let mut correct = 0;
    for s in report.datasets.values_mut() {
        s.precision = s.correct as f64 / s.total as f64;
        correct += s.correct;
    }
    if report.scored > 0 {
        report.overall = correct as f64 / report.scored as f64;
        report.dataset_mean =
            report.datasets.values().map(|s| s.precision).sum::<f64>() / report.datasets.len() as f64;
    }
    report
}

fn score_item(
    item: &EvalItem,
    scorer: &dyn Scorer,
    seed: u64,
    cache: &mut HashMap<String, UnitEmbedding>,
) -> Result<bool> {
    item.check()?;
    let mut order: Vec<usize> = (0..item.candidates.len()).collect();
    SeededRng::derive(seed, &item.id).shuffle(&mut order);
    let mut embs = Vec::with_capacity(order.len());
    for &i in &order {
        let text = &item.candidates[i].text;
        let z = match cache.get(text) {
            Some(z) => z.clone(),
            None => {
                let z = scorer.embed_candidate(text)?;
                cache.insert(text.clone(), z.clone());
                z
            }
        };
        embs.push(z);
    }
    let q = scorer.embed_query(item)?;
    let ranked = rank(&q, &embs)?;
    Ok(item.candidates[order[ranked[0].0]].is_gt)
}

/// Ranked candidate with its score and ground-truth flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub index: usize,
    pub text: String,
    pub score: f64,
    pub is_gt: bool,
}

/// Embeds the query and every candidate and returns them best first.
pub fn retrieve_candidates(
    model: &Model,
    params: &ParamStore,
    query: &EmbedInput,
    candidates: &[Candidate],
) -> Result<Vec<RankedCandidate>> {
    let q = model.embed(params, query)?;
    let embs = candidates
        .iter()
        .map(|c| model.embed(params, &EmbedInput::caption(&c.text)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank(&q, &embs)?
        .into_iter()
        .map(|(i, score)| RankedCandidate {
            index: i,
            text: candidates[i].text.clone(),
            score,
            is_gt: candidates[i].is_gt,
        })
        .collect())
}
