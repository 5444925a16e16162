//! Object sampling and generation prompts.

use sha2::{Digest, Sha256};
use virtue_core::numkernel::SeededRng;

use crate::ingest::{CocoAnnotation, CocoRecord};

pub const GENERATE_TEMPLATE: &str = include_str!("../assets/generate_prompt.txt");
pub const VERIFY_TEMPLATE: &str = include_str!("../assets/verify_prompt.txt");
pub const MAX_OBJECTS: usize = 5;

/// Uniformly samples `min(max, n)` annotations without replacement using
/// a reservoir, returned in their original order.
pub fn sample_objects<'a>(record: &'a CocoRecord, rng: &mut SeededRng, max: usize) -> Vec<&'a CocoAnnotation> {
    let mut reservoir: Vec<usize> = Vec::with_capacity(max);
    for i in 0..record.annotations.len() {
        if reservoir.len() < max {
            reservoir.push(i);
        } else {
            let j = rng.index(i + 1);
            if j < max {
                reservoir[j] = i;
            }
        }
    }
    reservoir.sort_unstable();
    reservoir.into_iter().map(|i| &record.annotations[i]).collect()
}

/// `[x1, y1, x2, y2]` with two decimals.
pub fn corner_text(bbox: [f64; 4]) -> String {
    let [x, y, w, h] = bbox;
    format!("[{:.2}, {:.2}, {:.2}, {:.2}]", x, y, x + w, y + h)
}

/// Fills the generation template for one annotation. A missing caption is
/// rendered as the bare category, which selects the object-only rule.
pub fn build_prompt(record: &CocoRecord, ann: &CocoAnnotation) -> String {
    let caption = ann
        .caption
        .as_deref()
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .unwrap_or(&ann.category);
    GENERATE_TEMPLATE
        .replace("{height}", &record.height.to_string())
        .replace("{width}", &record.width.to_string())
        .replace("{caption}", caption)
        .replace("{category}", &ann.category)
        .replace("{bbox}", &corner_text(ann.bbox))
}

/// Hex digest identifying the template revision.
pub fn template_hash(template: &str) -> String {
    hex::encode(Sha256::digest(template.as_bytes()))
}

/// Value of a `key: value` line in a filled prompt.
pub fn prompt_field<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    let tag = format!("{key}: ");
    prompt.lines().find_map(|l| l.strip_prefix(tag.as_str())).map(str::trim)
}
