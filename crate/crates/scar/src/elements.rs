//! Decomposition of captions into `<object> <relation> <scene>`.
//!
//! The offline extractor aligns every negative with the ground truth by a
//! word-level longest common subsequence. The ground-truth words a negative
//! replaces belong to the element its type swaps: object swaps locate the
//! object, scene swaps the scene, relation swaps the relation. This keeps
//! working when a relation negative moves the relation to a different place
//! in the sentence, which a left-to-right grammar cannot follow.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use virtue_core::retrieval::{NegativeType, ScarSample};

use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionElements {
    pub object: String,
    pub relation: String,
    pub scene: String,
}

impl CaptionElements {
    pub fn get(&self, kind: NegativeType) -> &str {
        match kind {
            NegativeType::ObjectSwap => &self.object,
            NegativeType::BackgroundRelation => &self.relation,
            NegativeType::GlobalContext => &self.scene,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeElements {
    pub text: String,
    #[serde(rename = "type")]
    pub kind: NegativeType,
    pub object: String,
    pub relation: String,
    pub scene: String,
}

impl NegativeElements {
    pub fn elements(&self) -> CaptionElements {
        CaptionElements {
            object: self.object.clone(),
            relation: self.relation.clone(),
            scene: self.scene.clone(),
        }
    }
}

/// The words a negative replaced and the words it put in their place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Swap {
    pub index: usize,
    #[serde(rename = "type")]
    pub kind: NegativeType,
    pub gold: String,
    pub swapped: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub ground_truth: CaptionElements,
    pub negatives: Vec<NegativeElements>,
    pub swaps: Vec<Swap>,
}

/// Extracts elements for a sample; remote verifiers implement this too.
pub trait Verifier {
    fn extract(&self, sample: &ScarSample) -> Result<Extraction>;
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Matched index pairs of a longest common subsequence, earliest match
/// first on ties.
pub fn align(a: &[String], b: &[String]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[at(i, j)] = if a[i] == b[j] {
                dp[at(i + 1, j + 1)] + 1
            } else {
                dp[at(i + 1, j)].max(dp[at(i, j + 1)])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut pairs = Vec::new();
    while i < n && j < m {
        if a[i] == b[j] && dp[at(i, j)] == dp[at(i + 1, j + 1)] + 1 {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if dp[at(i + 1, j)] >= dp[at(i, j + 1)] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

struct Diff {
    /// Ground-truth word indices not matched.
    gold: BTreeSet<usize>,
    /// Negative words not matched, in order.
    added: Vec<String>,
}

fn diff(gt: &[String], neg: &[String]) -> Diff {
    let pairs = align(gt, neg);
    let kept_g: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let kept_n: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    Diff {
        gold: (0..gt.len()).filter(|i| !kept_g.contains(i)).collect(),
        added: neg
            .iter()
            .enumerate()
            .filter(|(j, _)| !kept_n.contains(j))
            .map(|(_, w)| w.clone())
            .collect(),
    }
}

fn join(gt: &[String], idx: &BTreeSet<usize>) -> String {
    idx.iter().map(|&i| gt[i].as_str()).collect::<Vec<_>>().join(" ")
}

/// Element words with the replaced ones swapped for the added words.
fn rewrite(gt: &[String], element: &BTreeSet<usize>, d: &Diff) -> String {
    let mut out: Vec<&str> = Vec::new();
    let mut inserted = false;
    for &i in element {
        if d.gold.contains(&i) {
            if !inserted {
                out.extend(d.added.iter().map(String::as_str));
                inserted = true;
            }
        } else {
            out.push(&gt[i]);
        }
    }
    if !inserted {
        out.extend(d.added.iter().map(String::as_str));
    }
    out.join(" ")
}

/// Deterministic alignment-based extractor used offline.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleExtractor;

impl Verifier for RuleExtractor {
    fn extract(&self, sample: &ScarSample) -> Result<Extraction> {
        let gt = words(&sample.gt_caption);
        let diffs: Vec<Diff> = sample.negatives.iter().map(|n| diff(&gt, &words(&n.text))).collect();
        let span = |kind: NegativeType| -> BTreeSet<usize> {
            sample
                .negatives
                .iter()
                .zip(&diffs)
                .filter(|(n, _)| n.kind == kind)
                .flat_map(|(_, d)| d.gold.iter().copied())
                .collect()
        };
        let object = span(NegativeType::ObjectSwap);
        let relation = span(NegativeType::BackgroundRelation);
        let scene = span(NegativeType::GlobalContext);
        let ground_truth = CaptionElements {
            object: join(&gt, &object),
            relation: join(&gt, &relation),
            scene: join(&gt, &scene),
        };
        let mut negatives = Vec::with_capacity(diffs.len());
        let mut swaps = Vec::with_capacity(diffs.len());
        for (k, (n, d)) in sample.negatives.iter().zip(&diffs).enumerate() {
            let element = |kind: NegativeType, idx: &BTreeSet<usize>| {
                if kind == n.kind || !d.gold.is_disjoint(idx) {
                    rewrite(&gt, idx, d)
                } else {
                    join(&gt, idx)
                }
            };
            negatives.push(NegativeElements {
                text: n.text.clone(),
                kind: n.kind,
                object: element(NegativeType::ObjectSwap, &object),
                relation: element(NegativeType::BackgroundRelation, &relation),
                scene: element(NegativeType::GlobalContext, &scene),
            });
            swaps.push(Swap {
                index: k,
                kind: n.kind,
                gold: join(&gt, &d.gold),
                swapped: d.added.join(" "),
            });
        }
        Ok(Extraction {
            ground_truth,
            negatives,
            swaps,
        })
    }
}
