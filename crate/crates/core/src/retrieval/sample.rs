use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoders::Bbox;
use crate::error::{Error, Result};

pub const SAMPLE_SCHEMA: &str = "scar-sample/1";
pub const NEGATIVES_PER_TYPE: usize = 3;
pub const NEGATIVE_COUNT: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeType {
    GlobalContext,
    BackgroundRelation,
    ObjectSwap,
}

impl NegativeType {
    pub const ALL: [NegativeType; 3] = [
        NegativeType::GlobalContext,
        NegativeType::BackgroundRelation,
        NegativeType::ObjectSwap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NegativeType::GlobalContext => "global_context",
            NegativeType::BackgroundRelation => "background_relation",
            NegativeType::ObjectSwap => "object_swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Negative {
    pub text: String,
    #[serde(rename = "type")]
    pub kind: NegativeType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

/// One benchmark record: an image region and ten candidate captions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScarSample {
    pub schema: String,
    pub id: String,
    pub dataset: String,
    pub image: String,
    pub image_size: ImageSize,
    /// Absolute `[x_min, y_min, width, height]` pixels.
    pub bbox: [f64; 4],
    pub gt_caption: String,
    pub negatives: Vec<Negative>,
}

/// A caption candidate with an explicit ground-truth flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub is_gt: bool,
}

impl ScarSample {
    pub fn bbox(&self) -> Bbox {
        Bbox::from_xywh(self.bbox)
    }

    /// Structural rules: nine negatives, three per type, no duplicate text
    /// within a type, non-empty caption and a box inside the image.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SAMPLE_SCHEMA {
            return Err(Error::Validation(format!("unknown schema {:?}", self.schema)));
        }
        if self.gt_caption.trim().is_empty() {
            return Err(Error::Validation("empty ground-truth caption".into()));
        }
        if self.negatives.len() != NEGATIVE_COUNT {
            return Err(Error::Validation(format!(
                "expected {NEGATIVE_COUNT} negatives, got {}",
                self.negatives.len()
            )));
        }
        let mut by_type: BTreeMap<NegativeType, BTreeSet<String>> = BTreeMap::new();
        for n in &self.negatives {
            if !by_type.entry(n.kind).or_default().insert(n.text.trim().to_lowercase()) {
                return Err(Error::Validation(format!(
                    "duplicate {} negative {:?}",
                    n.kind.as_str(),
                    n.text
                )));
            }
        }
        for t in NegativeType::ALL {
            let k = by_type.get(&t).map_or(0, BTreeSet::len);
            if k != NEGATIVES_PER_TYPE {
                return Err(Error::Validation(format!(
                    "expected {NEGATIVES_PER_TYPE} {} negatives, got {k}",
                    t.as_str()
                )));
            }
        }
        self.bbox()
            .validate(f64::from(self.image_size.width), f64::from(self.image_size.height))
    }

    /// Ground truth first, then negatives in stored order.
    pub fn candidates(&self) -> Vec<Candidate> {
        std::iter::once(Candidate {
            text: self.gt_caption.clone(),
            is_gt: true,
        })
        .chain(self.negatives.iter().map(|n| Candidate {
            text: n.text.clone(),
            is_gt: false,
        }))
        .collect()
    }
}
