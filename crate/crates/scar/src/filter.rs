//! Machine filter cascade: structural rules, element cross checks and the
//! lexicon-based synonym check. Every failure names the rule it broke so a
//! stored sample can be re-checked against that rule alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use virtue_core::retrieval::{NegativeType, ScarSample, NEGATIVES_PER_TYPE, NEGATIVE_COUNT};

use crate::elements::{CaptionElements, Extraction, NegativeElements, Swap, Verifier};
use crate::error::Result;
use crate::lexicon::Lexicon;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    #[serde(rename = "negative count is not 9")]
    NegativeCount,
    #[serde(rename = "type split is not 3/3/3")]
    TypeSplit,
    #[serde(rename = "duplicate within type")]
    DuplicateWithinType,
    #[serde(rename = "ground-truth caption lacks an object")]
    GtLacksObject,
    #[serde(rename = "ground-truth caption lacks a relation")]
    GtLacksRelation,
    #[serde(rename = "ground-truth caption lacks a scene")]
    GtLacksScene,
    #[serde(rename = "negative repeats the ground truth")]
    RepeatsGroundTruth,
    #[serde(rename = "global context negative changes more than the scene")]
    GlobalContextCheck,
    #[serde(rename = "background relation negative changes more than the relation")]
    BackgroundRelationCheck,
    #[serde(rename = "object swap negative changes more than the object")]
    ObjectSwapCheck,
    #[serde(rename = "swap is a synonym, hypernym or hyponym")]
    SynonymSwap,
}

impl Rule {
    pub const ALL: [Rule; 11] = [
        Rule::NegativeCount,
        Rule::TypeSplit,
        Rule::DuplicateWithinType,
        Rule::GtLacksObject,
        Rule::GtLacksRelation,
        Rule::GtLacksScene,
        Rule::RepeatsGroundTruth,
        Rule::GlobalContextCheck,
        Rule::BackgroundRelationCheck,
        Rule::ObjectSwapCheck,
        Rule::SynonymSwap,
    ];

    pub fn id(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }

    pub fn from_id(id: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.id() == id)
    }

    fn cross_check(kind: NegativeType) -> Rule {
        match kind {
            NegativeType::GlobalContext => Rule::GlobalContextCheck,
            NegativeType::BackgroundRelation => Rule::BackgroundRelationCheck,
            NegativeType::ObjectSwap => Rule::ObjectSwapCheck,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Passed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub sample_id: String,
    pub status: Status,
    /// Distinct rule ids, in rule order.
    pub reasons: Vec<Rule>,
    pub violations: Vec<Violation>,
    pub ground_truth_elements: CaptionElements,
    pub negative_elements: Vec<NegativeElements>,
    pub swaps: Vec<Swap>,
}

impl FilterReport {
    pub fn passed(&self) -> bool {
        self.status == Status::Passed
    }

    fn add(&mut self, found: Vec<Violation>) {
        self.violations.extend(found);
        let rules: BTreeSet<Rule> = self.violations.iter().map(|v| v.rule).collect();
        self.reasons = rules.into_iter().collect();
        self.status = if self.reasons.is_empty() {
            Status::Passed
        } else {
            Status::Failed
        };
    }
}

fn same(a: &str, b: &str) -> bool {
    crate::elements::words(a) == crate::elements::words(b)
}

fn label(kind: NegativeType) -> &'static str {
    match kind {
        NegativeType::GlobalContext => "global context",
        NegativeType::BackgroundRelation => "background relation",
        NegativeType::ObjectSwap => "object swap",
    }
}

/// Evaluates one rule. `lexicon` is only consulted by the synonym rule.
pub fn check_rule(rule: Rule, sample: &ScarSample, ex: &Extraction, lexicon: Option<&Lexicon>) -> Vec<Violation> {
    let v = |detail: String| Violation { rule, detail };
    let mut out = Vec::new();
    let gt = &ex.ground_truth;
    match rule {
        Rule::NegativeCount => {
            if sample.negatives.len() != NEGATIVE_COUNT {
                out.push(v(format!("Number of negatives is {}, not {NEGATIVE_COUNT}", sample.negatives.len())));
            }
        }
        Rule::TypeSplit => {
            // Only meaningful once the count is right; a short list is
            // reported by the count rule alone.
            if sample.negatives.len() == NEGATIVE_COUNT {
                for kind in NegativeType::ALL {
                    let k = sample.negatives.iter().filter(|n| n.kind == kind).count();
                    if k != NEGATIVES_PER_TYPE {
                        out.push(v(format!("Number of {} negatives is {k}, not {NEGATIVES_PER_TYPE}", label(kind))));
                    }
                }
            }
        }
        Rule::DuplicateWithinType => {
            let mut seen: BTreeMap<NegativeType, BTreeSet<Vec<String>>> = BTreeMap::new();
            for (i, n) in sample.negatives.iter().enumerate() {
                if !seen.entry(n.kind).or_default().insert(crate::elements::words(&n.text)) {
                    out.push(v(format!("{} negative {} repeats {:?}", label(n.kind), i + 1, n.text)));
                }
            }
        }
        Rule::GtLacksObject | Rule::GtLacksRelation | Rule::GtLacksScene => {
            let (value, what) = match rule {
                Rule::GtLacksObject => (&gt.object, "an object"),
                Rule::GtLacksRelation => (&gt.relation, "a relation"),
                _ => (&gt.scene, "a scene"),
            };
            if value.trim().is_empty() {
                out.push(v(format!("ground-truth caption {:?} lacks {what}", sample.gt_caption)));
            }
        }
        Rule::RepeatsGroundTruth => {
            for (i, n) in sample.negatives.iter().enumerate() {
                if same(&n.text, &sample.gt_caption) {
                    out.push(v(format!("{} negative {} equals the ground truth", label(n.kind), i + 1)));
                }
            }
        }
        Rule::GlobalContextCheck | Rule::BackgroundRelationCheck | Rule::ObjectSwapCheck => {
            for (i, n) in ex.negatives.iter().enumerate() {
                if Rule::cross_check(n.kind) != rule || same(&n.text, &sample.gt_caption) {
                    continue;
                }
                let ne = n.elements();
                for other in NegativeType::ALL {
                    let (g, x) = (gt.get(other), ne.get(other));
                    if other == n.kind {
                        if same(g, x) {
                            out.push(v(format!("{} negative {} keeps the {}", label(n.kind), i + 1, element_name(other))));
                        }
                    } else if !same(g, x) {
                        out.push(v(format!(
                            "{} negative {} changes the {} ({:?} -> {:?})",
                            label(n.kind),
                            i + 1,
                            element_name(other),
                            g,
                            x
                        )));
                    }
                }
            }
        }
        Rule::SynonymSwap => {
            if let Some(lex) = lexicon {
                out = synonym_violations(&ex.swaps, lex);
            }
        }
    }
    out
}

fn synonym_violations(swaps: &[Swap], lex: &Lexicon) -> Vec<Violation> {
    swaps
        .iter()
        .filter(|s| s.kind != NegativeType::BackgroundRelation)
        .filter(|s| !s.gold.trim().is_empty() && !s.swapped.trim().is_empty())
        .filter(|s| lex.related(&s.gold, &s.swapped))
        .map(|s| Violation {
            rule: Rule::SynonymSwap,
            detail: format!(
                "{} negative {}: {:?} and {:?} are lexical variants",
                label(s.kind),
                s.index + 1,
                s.gold,
                s.swapped
            ),
        })
        .collect()
}

fn element_name(kind: NegativeType) -> &'static str {
    match kind {
        NegativeType::GlobalContext => "scene",
        NegativeType::BackgroundRelation => "relation",
        NegativeType::ObjectSwap => "object",
    }
}

/// Structural, decomposition and cross checks. Fails with
/// [`ScarError::VerifierUnavailable`](crate::ScarError) when extraction
/// cannot be obtained; such samples are paused, never passed.
pub fn verify_structure(sample: &ScarSample, verifier: &dyn Verifier) -> Result<FilterReport> {
    let ex = verifier.extract(sample)?;
    let mut report = FilterReport {
        sample_id: sample.id.clone(),
        status: Status::Passed,
        reasons: Vec::new(),
        violations: Vec::new(),
        ground_truth_elements: ex.ground_truth.clone(),
        negative_elements: ex.negatives.clone(),
        swaps: ex.swaps.clone(),
    };
    for rule in Rule::ALL.into_iter().filter(|r| *r != Rule::SynonymSwap) {
        report.add(check_rule(rule, sample, &ex, None));
    }
    Ok(report)
}

/// Adds lexicon hits between each swapped phrase and the gold phrase it
/// replaced. Relation swaps are not nouns and are not looked up.
pub fn synonym_filter(mut report: FilterReport, lexicon: &Lexicon) -> FilterReport {
    let found = synonym_violations(&report.swaps, lexicon);
    report.add(found);
    report
}

/// Full cascade for one sample.
pub fn filter_sample(sample: &ScarSample, verifier: &dyn Verifier, lexicon: &Lexicon) -> Result<FilterReport> {
    Ok(synonym_filter(verify_structure(sample, verifier)?, lexicon))
}

/// Re-runs a single rule on a stored sample; true when it still fails.
pub fn replay_rule(rule: Rule, sample: &ScarSample, verifier: &dyn Verifier, lexicon: &Lexicon) -> Result<bool> {
    let ex = verifier.extract(sample)?;
    Ok(!check_rule(rule, sample, &ex, Some(lexicon)).is_empty())
}
