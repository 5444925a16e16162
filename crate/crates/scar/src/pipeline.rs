//! Generation, filtering and emission of benchmark splits.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use virtue_core::numkernel::SeededRng;
use virtue_core::retrieval::{ImageSize, ScarSample, SAMPLE_SCHEMA};

use crate::client::{generate_candidates, GeneratorClient, RetryPolicy};
use crate::elements::Verifier;
use crate::error::{Result, ScarError};
use crate::filter::{filter_sample, FilterReport};
use crate::ingest::CocoRecord;
use crate::lexicon::Lexicon;
use crate::prompt::{build_prompt, sample_objects, MAX_OBJECTS};

pub const REVIEW_QUEUE_FILE: &str = "review_queue.jsonl";
pub const STATS_FILE: &str = "stats.json";
/// How referring datasets with several expressions per object are counted.
pub const SAMPLE_UNIT: &str = "one sample per referring expression";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Eval];

    pub fn file_name(self) -> String {
        format!("{self}.jsonl")
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

impl FromStr for Split {
    type Err = ScarError;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(ScarError::Config(format!("unknown split {other:?}"))),
        }
    }
}

pub fn sample_id(dataset: &str, image_id: &str, annotation_id: &str) -> String {
    format!("{dataset}:{image_id}:{annotation_id}")
}

fn split_id(s: &ScarSample) -> (&str, &str) {
    let rest = s.id.strip_prefix(&format!("{}:", s.dataset)).unwrap_or(&s.id);
    rest.rsplit_once(':').unwrap_or((rest, ""))
}

/// Numbers compare by value, everything else lexically.
fn natural(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Emission order: dataset, image id, annotation id.
pub fn sample_order(a: &ScarSample, b: &ScarSample) -> Ordering {
    let (ai, aa) = split_id(a);
    let (bi, ba) = split_id(b);
    a.dataset
        .cmp(&b.dataset)
        .then_with(|| natural(ai, bi))
        .then_with(|| natural(aa, ba))
        .then_with(|| a.id.cmp(&b.id))
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub seed: u64,
    pub max_objects: usize,
    pub policy: RetryPolicy,
}

impl GenerateOptions {
    pub fn new(seed: u64) -> GenerateOptions {
        GenerateOptions {
            seed,
            max_objects: MAX_OBJECTS,
            policy: RetryPolicy::default(),
        }
    }
}

/// A generation that was given up on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct Generated {
    pub samples: Vec<ScarSample>,
    pub dropped: Vec<Dropped>,
}

/// Samples up to `max_objects` annotations per record and asks the client
/// for candidates. Each record draws from its own seeded stream, so the
/// result does not depend on record order.
pub fn generate<I>(records: I, client: &dyn GeneratorClient, opts: &GenerateOptions) -> Result<Generated>
where
    I: IntoIterator<Item = Result<CocoRecord>>,
{
    let mut out = Generated::default();
    for record in records {
        let record = record?;
        let mut rng = SeededRng::derive(opts.seed, &format!("{}:{}", record.dataset, record.image_id));
        for ann in sample_objects(&record, &mut rng, opts.max_objects) {
            let id = sample_id(&record.dataset, &record.image_id, &ann.id);
            match generate_candidates(client, &build_prompt(&record, ann), &opts.policy) {
                Ok(c) => out.samples.push(ScarSample {
                    schema: SAMPLE_SCHEMA.to_string(),
                    id,
                    dataset: record.dataset.clone(),
                    image: record.file_name.clone(),
                    image_size: ImageSize {
                        width: record.width,
                        height: record.height,
                    },
                    bbox: ann.bbox,
                    gt_caption: c.ground_truth,
                    negatives: c.negatives,
                }),
                Err(e) => {
                    log::warn!("dropping {id}: {e}");
                    out.dropped.push(Dropped {
                        sample_id: id,
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct Filtered {
    pub passed: Vec<ScarSample>,
    pub reports: Vec<FilterReport>,
    /// Samples whose verification could not be obtained.
    pub paused: Vec<Dropped>,
}

/// Runs the filter cascade; unavailable verification pauses a sample
/// instead of passing it.
pub fn filter_all(samples: Vec<ScarSample>, verifier: &dyn Verifier, lexicon: &Lexicon) -> Result<Filtered> {
    let mut out = Filtered::default();
    for s in samples {
        match filter_sample(&s, verifier, lexicon) {
            Ok(report) => {
                if report.passed() {
                    out.passed.push(s);
                } else {
                    log::info!("{} failed: {:?}", s.id, report.reasons);
                }
                out.reports.push(report);
            }
            Err(ScarError::VerifierUnavailable(reason)) => {
                log::warn!("pausing {}: {reason}", s.id);
                out.paused.push(Dropped { sample_id: s.id, reason });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ScarError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| ScarError::io(path, e))?;
    f.write_all(&buf).map_err(|e| ScarError::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| ScarError::io(path, e))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| ScarError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| ScarError::Parse {
                path: path.to_path_buf(),
                offset: offset + e.column().saturating_sub(1) as u64,
                message: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// Entry of the human review queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub sample_id: String,
    pub status: String,
    pub sample: ScarSample,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub split_file: PathBuf,
    pub review_queue: Option<PathBuf>,
    pub count: usize,
}

/// Writes passed samples to `{split}.jsonl` in emission order after
/// re-validating each. The evaluation split also gets a review queue; the
/// training split never has one.
pub fn emit(samples: &[ScarSample], split: Split, dir: &Path) -> Result<Emitted> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(sample_order);
    let mut ids = BTreeSet::new();
    for s in &sorted {
        s.validate().map_err(|e| ScarError::Invalid(format!("{}: {e}", s.id)))?;
        if !ids.insert(s.id.as_str()) {
            return Err(ScarError::Invalid(format!("duplicate sample id {}", s.id)));
        }
    }
    let split_file = dir.join(split.file_name());
    write_jsonl(&split_file, &sorted)?;
    let queue = dir.join(REVIEW_QUEUE_FILE);
    let review_queue = match split {
        Split::Eval => {
            let items: Vec<ReviewItem> = sorted
                .iter()
                .map(|s| ReviewItem {
                    sample_id: s.id.clone(),
                    status: "pending".into(),
                    sample: s.clone(),
                })
                .collect();
            write_jsonl(&queue, &items)?;
            Some(queue)
        }
        Split::Train => None,
    };
    Ok(Emitted {
        split_file,
        review_queue,
        count: sorted.len(),
    })
}

/// Display name of a dataset id in the statistics table.
pub fn dataset_label(id: &str) -> String {
    let key: String = id.to_lowercase().chars().filter(|c| c.is_alphanumeric() || *c == '+').collect();
    match key.as_str() {
        "refcocog" => "RefCOCOg",
        "refcoco+" | "refcocoplus" => "RefCOCO+",
        "cocostuff" | "coco" => "COCO-Stuff",
        "visualgenome" | "vg" => "VisualGenome",
        "ade20k" | "ade" => "ADE20K",
        _ => return id.to_string(),
    }
    .to_string()
}

pub const TABLE_ROWS: [&str; 5] = ["RefCOCOg", "RefCOCO+", "COCO-Stuff", "VisualGenome", "ADE20K"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub annotations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub dataset: String,
    pub train: Counts,
    pub eval: Counts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub rows: Vec<StatsRow>,
    pub total: StatsRow,
    pub unit: String,
}

fn counts(samples: &[ScarSample]) -> BTreeMap<String, Counts> {
    let mut images: BTreeMap<String, BTreeSet<&str>> = BTreeMap::new();
    let mut anns: BTreeMap<String, usize> = BTreeMap::new();
    for s in samples {
        let label = dataset_label(&s.dataset);
        images.entry(label.clone()).or_default().insert(split_id(s).0);
        *anns.entry(label).or_default() += 1;
    }
    anns.into_iter()
        .map(|(k, n)| {
            let c = Counts {
                images: images[&k].len(),
                annotations: n,
            };
            (k, c)
        })
        .collect()
}

/// Images and annotations per dataset and split. The five source datasets
/// always get a row; other ids follow in name order.
pub fn stats(train: &[ScarSample], eval: &[ScarSample]) -> Stats {
    let (t, e) = (counts(train), counts(eval));
    let mut names: Vec<String> = TABLE_ROWS.iter().map(|s| s.to_string()).collect();
    let extra: BTreeSet<&String> = t.keys().chain(e.keys()).filter(|k| !TABLE_ROWS.contains(&k.as_str())).collect();
    names.extend(extra.into_iter().cloned());
    let rows: Vec<StatsRow> = names
        .into_iter()
        .map(|d| StatsRow {
            train: t.get(&d).copied().unwrap_or_default(),
            eval: e.get(&d).copied().unwrap_or_default(),
            dataset: d,
        })
        .collect();
    let sum = |f: &dyn Fn(&StatsRow) -> Counts| {
        rows.iter().map(f).fold(Counts::default(), |a, c| Counts {
            images: a.images + c.images,
            annotations: a.annotations + c.annotations,
        })
    };
    let total = StatsRow {
        dataset: "Total".into(),
        train: sum(&|r| r.train),
        eval: sum(&|r| r.eval),
    };
    Stats {
        rows,
        total,
        unit: SAMPLE_UNIT.into(),
    }
}

/// `1234567` as `1,234,567`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl Stats {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, r: &StatsRow| {
            s.push_str(&format!(
                "{:<14}{:>12}{:>15}{:>12}{:>15}\n",
                r.dataset,
                thousands(r.train.images),
                thousands(r.train.annotations),
                thousands(r.eval.images),
                thousands(r.eval.annotations)
            ));
        };
        s.push_str(&format!("{:<14}{:>27}{:>27}\n", "", "Train", "Evaluation"));
        s.push_str(&format!(
            "{:<14}{:>12}{:>15}{:>12}{:>15}\n",
            "", "#Images", "#Annotations", "#Images", "#Annotations"
        ));
        for r in &self.rows {
            line(&mut s, r);
        }
        line(&mut s, &self.total);
        s.push_str(&format!("({})\n", self.unit));
        s
    }

    /// Reads whichever split files exist in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Stats> {
        let load = |split: Split| -> Result<Vec<ScarSample>> {
            let p = dir.join(split.file_name());
            if p.exists() {
                read_jsonl(&p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(stats(&load(Split::Train)?, &load(Split::Eval)?))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(STATS_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| ScarError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_groups_digits() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(957714), "957,714");
        assert_eq!(thousands(1539), "1,539");
    }

    #[test]
    fn labels_map_source_ids() {
        assert_eq!(dataset_label("vg"), "VisualGenome");
        assert_eq!(dataset_label("refcoco+"), "RefCOCO+");
        assert_eq!(dataset_label("synth"), "synth");
    }
}
