//! Candidate generation clients and the tolerant reply reader.
//!
//! [`MockClient`] answers the generation prompt offline by splitting the
//! caption into its three elements and substituting entries from fixed word
//! lists. [`HttpClient`] posts `{"prompt": ...}` to an endpoint and takes
//! the response body as the model reply.

use std::thread::sleep;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use virtue_core::numkernel::SeededRng;
use virtue_core::retrieval::{Negative, NegativeType, ScarSample, NEGATIVE_COUNT};

use crate::elements::{CaptionElements, Extraction, NegativeElements, Swap, Verifier};
use crate::error::{Result, ScarError};
use crate::prompt::{prompt_field, VERIFY_TEMPLATE};

pub trait GeneratorClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::ZERO,
            ..RetryPolicy::default()
        }
    }

    /// Runs `f` until it succeeds or the attempts are used up.
    pub fn run<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut last = String::new();
        let attempts = self.attempts.max(1);
        for k in 0..attempts {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!("attempt {} of {attempts} failed: {e}", k + 1);
                    last = e.to_string();
                    if k + 1 < attempts && !self.base_delay.is_zero() {
                        sleep(self.base_delay * 2u32.pow(k as u32));
                    }
                }
            }
        }
        Err(ScarError::Generation {
            attempts,
            reason: last,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidates {
    pub ground_truth: String,
    pub negatives: Vec<Negative>,
}

/// Removes a surrounding Markdown code fence, if any.
pub fn strip_fences(reply: &str) -> &str {
    let t = reply.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Parses a generation reply; anything but nine typed negatives and a
/// non-empty ground truth is an error.
pub fn parse_reply(reply: &str) -> Result<Candidates> {
    let c: Candidates = serde_json::from_str(strip_fences(reply))?;
    if c.ground_truth.trim().is_empty() {
        return Err(ScarError::Invalid("reply has an empty ground truth".into()));
    }
    if c.negatives.len() != NEGATIVE_COUNT {
        return Err(ScarError::Invalid(format!(
            "reply has {} negatives, expected {NEGATIVE_COUNT}",
            c.negatives.len()
        )));
    }
    Ok(c)
}

/// Asks `client` for candidates, retrying failed calls and unusable
/// replies under `policy`.
pub fn generate_candidates(client: &dyn GeneratorClient, prompt: &str, policy: &RetryPolicy) -> Result<Candidates> {
    policy.run(|| parse_reply(&client.complete(prompt)?))
}

pub const MOCK_SCENES: [&str; 12] = [
    "in the garage",
    "on a racetrack",
    "in a field",
    "in the kitchen",
    "on the beach",
    "in a city bus station",
    "in a museum gallery",
    "on a mountaintop",
    "in a lush garden",
    "on a subway platform",
    "in a hospital waiting area",
    "in a gymnasium",
];

pub const MOCK_RELATIONS: [&str; 10] = [
    "with a helmet placed on the seat",
    "being washed",
    "loaded with packages",
    "covered in colorful graffiti",
    "illuminated by spotlights",
    "holding a stack of books",
    "wrapped in a blanket",
    "surrounded by scattered magazines",
    "lying on its side",
    "partly hidden behind a curtain",
];

pub const MOCK_OBJECTS: [&str; 14] = [
    "bicycle", "scooter", "horse", "bench", "trash can", "lamp", "sculpture", "parrot", "umbrella", "kite",
    "suitcase", "clock", "vase", "boat",
];

const SCENE_PREPOSITIONS: [&str; 13] = [
    "in", "on", "at", "by", "near", "inside", "under", "beside", "behind", "across", "along", "over", "within",
];
const DETERMINERS: [&str; 3] = ["a", "an", "the"];

/// Caption split into word ranges.
#[derive(Debug, Clone)]
struct Parts {
    words: Vec<String>,
    object: (usize, usize),
    scene: Option<(usize, usize)>,
    period: bool,
}

impl Parts {
    /// Object: the category words if present, else the first content
    /// word. Scene: the last scene preposition after the object up to the
    /// first adverb. Relation: everything else after the object.
    fn split(caption: &str, category: &str) -> Parts {
        let t = caption.trim();
        let period = t.ends_with('.');
        let words: Vec<String> = t.trim_end_matches('.').split_whitespace().map(str::to_string).collect();
        let lower: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let cat: Vec<String> = category.split_whitespace().map(str::to_lowercase).collect();
        let object = (0..lower.len())
            .find(|&i| !cat.is_empty() && lower[i..].starts_with(&cat))
            .map(|i| (i, i + cat.len()))
            .unwrap_or_else(|| {
                let i = lower.iter().position(|w| !DETERMINERS.contains(&w.as_str())).unwrap_or(0);
                (i, (i + 1).min(lower.len()))
            });
        let scene = (object.1..lower.len())
            .rev()
            .find(|&i| SCENE_PREPOSITIONS.contains(&lower[i].as_str()) && i + 1 < lower.len())
            .map(|start| {
                let end = (start + 2..lower.len())
                    .find(|&j| lower[j].ends_with("ly"))
                    .unwrap_or(lower.len());
                (start, end)
            });
        Parts {
            words,
            object,
            scene,
            period,
        }
    }

    fn relation(&self) -> Vec<usize> {
        (self.object.1..self.words.len())
            .filter(|i| self.scene.is_none_or(|(a, b)| *i < a || *i >= b))
            .collect()
    }

    fn text(&self, words: Vec<&str>) -> String {
        let mut s = words.join(" ");
        if self.period {
            s.push('.');
        }
        s
    }

    fn with_object(&self, object: &str) -> String {
        let first_upper = self.words[self.object.0].chars().next().is_some_and(char::is_uppercase);
        let object = if first_upper { capitalize(object) } else { object.to_string() };
        let mut out: Vec<&str> = self.words[..self.object.0].iter().map(String::as_str).collect();
        out.push(&object);
        out.extend(self.words[self.object.1..].iter().map(String::as_str));
        self.text(out)
    }

    fn with_scene(&self, scene: &str) -> String {
        let (a, b) = self.scene.unwrap_or((self.words.len(), self.words.len()));
        let mut out: Vec<&str> = self.words[..a].iter().map(String::as_str).collect();
        out.push(scene);
        out.extend(self.words[b..].iter().map(String::as_str));
        self.text(out)
    }

    fn with_relation(&self, relation: &str) -> String {
        let rel = self.relation();
        let mut out: Vec<&str> = self.words[..self.object.1].iter().map(String::as_str).collect();
        out.push(relation);
        out.extend(
            (self.object.1..self.words.len())
                .filter(|i| !rel.contains(i))
                .map(|i| self.words[i].as_str()),
        );
        self.text(out)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn pick<'a>(rng: &mut SeededRng, pool: &[&'a str], n: usize, exclude: &dyn Fn(&str) -> bool) -> Vec<&'a str> {
    let mut items: Vec<&str> = pool.iter().copied().filter(|p| !exclude(p)).collect();
    rng.shuffle(&mut items);
    items.truncate(n);
    items
}

/// Offline generator answering the generation template.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockClient {
    pub seed: u64,
    /// Wrap replies in a code fence, as chat models sometimes do.
    pub fenced: bool,
}

impl MockClient {
    pub fn new(seed: u64) -> MockClient {
        MockClient { seed, fenced: false }
    }

    /// Candidates for one caption and category.
    pub fn candidates(&self, caption: &str, category: &str) -> Candidates {
        let mut rng = SeededRng::derive(self.seed, &format!("{category}\u{1f}{caption}"));
        let cat_words = category.split_whitespace().count();
        let bare = caption.trim().trim_end_matches('.').eq_ignore_ascii_case(category.trim());
        let mut parts = Parts::split(caption, category);
        if bare || cat_words >= parts.words.len() {
            let rel = MOCK_RELATIONS[rng.index(MOCK_RELATIONS.len())];
            let scene = MOCK_SCENES[rng.index(MOCK_SCENES.len())];
            parts = Parts::split(&format!("{} {rel} {scene}.", capitalize(category.trim())), category);
        } else if parts.scene.is_none() {
            let scene = MOCK_SCENES[rng.index(MOCK_SCENES.len())];
            let base = caption.trim().trim_end_matches('.');
            let period = if caption.trim().ends_with('.') { "." } else { "" };
            parts = Parts::split(&format!("{base} {scene}{period}"), category);
        }
        let ground_truth = parts.text(parts.words.iter().map(String::as_str).collect());
        let lower_gt = ground_truth.to_lowercase();
        let scene_text = parts
            .scene
            .map(|(a, b)| parts.words[a..b].join(" ").to_lowercase())
            .unwrap_or_default();
        let object_text = parts.words[parts.object.0..parts.object.1].join(" ").to_lowercase();
        let mut negatives = Vec::with_capacity(NEGATIVE_COUNT);
        for s in pick(&mut rng, &MOCK_SCENES, 3, &|s| s == scene_text) {
            negatives.push(Negative {
                text: parts.with_scene(s),
                kind: NegativeType::GlobalContext,
            });
        }
        for r in pick(&mut rng, &MOCK_RELATIONS, 3, &|r| lower_gt.contains(r)) {
            negatives.push(Negative {
                text: parts.with_relation(r),
                kind: NegativeType::BackgroundRelation,
            });
        }
        for o in pick(&mut rng, &MOCK_OBJECTS, 3, &|o| o == object_text || lower_gt.contains(o)) {
            negatives.push(Negative {
                text: parts.with_object(o),
                kind: NegativeType::ObjectSwap,
            });
        }
        Candidates {
            ground_truth,
            negatives,
        }
    }
}

impl GeneratorClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let category = prompt_field(prompt, "category")
            .ok_or_else(|| ScarError::Client("prompt has no category line".into()))?;
        let caption = prompt_field(prompt, "caption").unwrap_or(category);
        let json = serde_json::to_string(&self.candidates(caption, category))?;
        Ok(if self.fenced { format!("```json\n{json}\n```") } else { json })
    }
}

/// Remote model behind a plain HTTP endpoint.
pub struct HttpClient {
    endpoint: String,
    agent: ureq::Agent,
    policy: RetryPolicy,
}

impl HttpClient {
    pub fn new(endpoint: &str, timeout: Duration) -> HttpClient {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpClient {
            endpoint: endpoint.to_string(),
            agent,
            policy: RetryPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> HttpClient {
        self.policy = policy;
        self
    }

    fn post(&self, prompt: &str) -> Result<String> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(serde_json::json!({ "prompt": prompt }))
            .map_err(|e| ScarError::Client(format!("{}: {e}", self.endpoint)))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| ScarError::Client(format!("{}: {e}", self.endpoint)))
    }
}

impl GeneratorClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.policy.run(|| self.post(prompt))
    }
}

#[derive(Deserialize)]
struct VerifierReply {
    #[serde(default)]
    ground_truth_elements: Option<CaptionElements>,
    #[serde(default)]
    negative_elements: Vec<NegativeElements>,
}

/// Element extraction delegated to a remote model using the verification
/// template. Transport failures surface as
/// [`ScarError::VerifierUnavailable`].
pub struct HttpVerifier {
    client: HttpClient,
}

impl HttpVerifier {
    pub fn new(client: HttpClient) -> HttpVerifier {
        HttpVerifier { client }
    }
}

pub fn verify_prompt(sample: &ScarSample) -> String {
    let body = serde_json::json!({
        "ground_truth": sample.gt_caption,
        "negatives": sample.negatives,
    });
    VERIFY_TEMPLATE.replace("{sample}", &body.to_string())
}

impl Verifier for HttpVerifier {
    fn extract(&self, sample: &ScarSample) -> Result<Extraction> {
        let reply = self
            .client
            .complete(&verify_prompt(sample))
            .map_err(|e| ScarError::VerifierUnavailable(e.to_string()))?;
        let parsed: VerifierReply = serde_json::from_str(strip_fences(&reply))
            .map_err(|e| ScarError::VerifierUnavailable(format!("unreadable verifier reply: {e}")))?;
        let ground_truth = parsed.ground_truth_elements.unwrap_or_default();
        let swaps = parsed
            .negative_elements
            .iter()
            .enumerate()
            .map(|(index, n)| Swap {
                index,
                kind: n.kind,
                gold: ground_truth.get(n.kind).to_string(),
                swapped: n.elements().get(n.kind).to_string(),
            })
            .collect();
        Ok(Extraction {
            ground_truth,
            negatives: parsed.negative_elements,
            swaps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fences_are_stripped() {
        assert_eq!(strip_fences("```json\n{\"a\": 1}\n```"), "{\"a\": 1}");
        assert_eq!(strip_fences("  {\"a\": 1} "), "{\"a\": 1}");
    }

    #[test]
    fn mock_keeps_full_captions() {
        let c = MockClient::new(0).candidates("Motorcycle in forefront fully shown.", "motorcycle");
        assert_eq!(c.ground_truth, "Motorcycle in forefront fully shown.");
        assert_eq!(c.negatives.len(), 9);
        let g = &c.negatives[0].text;
        assert!(g.starts_with("Motorcycle ") && g.ends_with(" fully shown."), "{g}");
        let r = &c.negatives[3].text;
        assert!(r.ends_with(" in forefront."), "{r}");
        let o = &c.negatives[6].text;
        assert!(o.ends_with(" in forefront fully shown.") && !o.starts_with("Motorcycle"), "{o}");
    }

    #[test]
    fn mock_completes_bare_labels() {
        let c = MockClient::new(0).candidates("boat", "boat");
        assert!(c.ground_truth.starts_with("Boat "));
        assert!(!Parts::split(&c.ground_truth, "boat").relation().is_empty());
    }
}
