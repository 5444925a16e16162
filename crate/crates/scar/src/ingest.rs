//! Source dataset adapters. Every format is normalised to [`CocoRecord`].
//!
//! Whole-file formats (`coco`, `refcoco`) are parsed in one go because their
//! annotations may appear anywhere in the file. The Visual Genome array and
//! the line-oriented formats are streamed: at most `window` records are held
//! between the parser and the consumer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::de::{DeserializeOwned, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Result, ScarError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: String,
    pub category: String,
    /// `[x_min, y_min, width, height]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoRecord {
    pub dataset: String,
    pub image_id: String,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<CocoAnnotation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Instances file with optional caption entries.
    Coco,
    /// Instances file plus a `refs` array of referring expressions.
    RefCoco,
    /// Visual Genome image array with per-image `objects`.
    VisualGenome,
    /// One image per line with inline `objects`.
    Ade20k,
    /// Already normalised records, one per line.
    Records,
}

impl FromStr for Format {
    type Err = ScarError;

    fn from_str(s: &str) -> Result<Format> {
        Ok(match s {
            "coco" => Format::Coco,
            "refcoco" => Format::RefCoco,
            "vg" => Format::VisualGenome,
            "ade20k" => Format::Ade20k,
            "records" => Format::Records,
            other => return Err(ScarError::Config(format!("unknown input format {other:?}"))),
        })
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Coco => "coco",
            Format::RefCoco => "refcoco",
            Format::VisualGenome => "vg",
            Format::Ade20k => "ade20k",
            Format::Records => "records",
        })
    }
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Dataset id written into every record.
    pub dataset: String,
    /// Records buffered ahead of the consumer when streaming.
    pub window: usize,
}

impl IngestOptions {
    pub fn new(dataset: &str) -> IngestOptions {
        IngestOptions {
            dataset: dataset.to_string(),
            window: 64,
        }
    }
}

/// A dropped annotation or image, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub image_id: String,
    pub annotation_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Default)]
struct Resident {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl Resident {
    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn leave(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }
}

enum Source {
    Buffered(std::vec::IntoIter<CocoRecord>),
    Lines {
        lines: std::io::Lines<BufReader<File>>,
        offset: u64,
        format: Format,
    },
    Channel {
        rx: Receiver<Result<CocoRecord>>,
        worker: Option<JoinHandle<()>>,
    },
    Done,
}

/// Iterator over normalised records. Out-of-bounds boxes are skipped with a
/// warning and listed by [`skipped`](Self::skipped).
pub struct RecordStream {
    path: PathBuf,
    dataset: String,
    source: Source,
    skipped: Arc<Mutex<Vec<Skip>>>,
    resident: Arc<Resident>,
}

impl RecordStream {
    pub fn skipped(&self) -> Vec<Skip> {
        self.skipped.lock().map(|s| s.clone()).unwrap_or_default()
    }

    /// Most records held at once between parser and consumer.
    pub fn peak_resident(&self) -> usize {
        self.resident.peak.load(Ordering::SeqCst)
    }
}

impl Iterator for RecordStream {
    type Item = Result<CocoRecord>;

    fn next(&mut self) -> Option<Result<CocoRecord>> {
        loop {
            let item = match &mut self.source {
                Source::Done => return None,
                Source::Buffered(it) => it.next().map(Ok),
                Source::Channel { rx, .. } => {
                    let r = rx.recv().ok();
                    if r.is_some() {
                        self.resident.leave();
                    }
                    r
                }
                Source::Lines { lines, offset, format } => match lines.next() {
                    None => None,
                    Some(Err(e)) => Some(Err(ScarError::io(&self.path, e))),
                    Some(Ok(line)) => {
                        let start = *offset;
                        *offset += line.len() as u64 + 1;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let parsed = parse_line(&line, *format, &self.dataset).map_err(|e| ScarError::Parse {
                            path: self.path.clone(),
                            offset: start + e.column().saturating_sub(1) as u64,
                            message: e.to_string(),
                        });
                        match parsed {
                            Ok(rec) => {
                                self.resident.enter();
                                self.resident.leave();
                                match check_record(rec, &self.skipped) {
                                    Some(r) => Some(Ok(r)),
                                    None => continue,
                                }
                            }
                            Err(e) => Some(Err(e)),
                        }
                    }
                },
            };
            if matches!(item, None | Some(Err(_))) {
                if let Source::Channel { worker, .. } = &mut self.source {
                    if let Some(w) = worker.take() {
                        let _ = w.join();
                    }
                }
                self.source = Source::Done;
            }
            return item;
        }
    }
}

/// Opens `path` in the given format.
pub fn ingest(path: &Path, format: Format, opts: &IngestOptions) -> Result<RecordStream> {
    if opts.window < 2 {
        return Err(ScarError::Config("ingest window must be at least 2".into()));
    }
    let skipped = Arc::new(Mutex::new(Vec::new()));
    let resident = Arc::new(Resident::default());
    let file = File::open(path).map_err(|e| ScarError::io(path, e))?;
    let source = match format {
        Format::Coco | Format::RefCoco => {
            let mut bytes = Vec::new();
            BufReader::new(file)
                .read_to_end(&mut bytes)
                .map_err(|e| ScarError::io(path, e))?;
            let records = parse_instances(&bytes, format, &opts.dataset)
                .map_err(|e| parse_error(path, &bytes, &e))?;
            let kept: Vec<CocoRecord> = records
                .into_iter()
                .filter_map(|r| check_record(r, &skipped))
                .collect();
            for _ in &kept {
                resident.enter();
            }
            for _ in &kept {
                resident.leave();
            }
            Source::Buffered(kept.into_iter())
        }
        Format::Ade20k | Format::Records => Source::Lines {
            lines: BufReader::new(file).lines(),
            offset: 0,
            format,
        },
        Format::VisualGenome => {
            let (tx, rx) = sync_channel(opts.window - 2);
            let dataset = opts.dataset.clone();
            let skipped_w = Arc::clone(&skipped);
            let resident_w = Arc::clone(&resident);
            let path_w = path.to_path_buf();
            let worker = std::thread::spawn(move || {
                let sink = |img: VgImage| {
                    if let Some(rec) = check_record(img.into_record(&dataset), &skipped_w) {
                        resident_w.enter();
                        if tx.send(Ok(rec)).is_err() {
                            resident_w.leave();
                            return false;
                        }
                    }
                    true
                };
                let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
                let outcome = de
                    .deserialize_seq(StreamVisitor {
                        sink,
                        _item: std::marker::PhantomData,
                    })
                    .and_then(|_| de.end());
                if let Err(e) = outcome {
                    let bytes = std::fs::read(&path_w).unwrap_or_default();
                    let _ = tx.send(Err(parse_error(&path_w, &bytes, &e)));
                }
            });
            Source::Channel {
                rx,
                worker: Some(worker),
            }
        }
    };
    Ok(RecordStream {
        path: path.to_path_buf(),
        dataset: opts.dataset.clone(),
        source,
        skipped,
        resident,
    })
}

/// Byte offset of a serde error position in `bytes`.
fn parse_error(path: &Path, bytes: &[u8], e: &serde_json::Error) -> ScarError {
    let mut offset = 0usize;
    if e.line() > 0 {
        let mut line = 1;
        for (i, b) in bytes.iter().enumerate() {
            if line == e.line() {
                offset = i;
                break;
            }
            if *b == b'\n' {
                line += 1;
                offset = i + 1;
            }
        }
        offset += e.column().saturating_sub(1);
    }
    ScarError::Parse {
        path: path.to_path_buf(),
        offset: offset.min(bytes.len()) as u64,
        message: e.to_string(),
    }
}

/// Drops out-of-bounds boxes; drops the record when nothing is left or the
/// image size is invalid.
fn check_record(mut rec: CocoRecord, skipped: &Mutex<Vec<Skip>>) -> Option<CocoRecord> {
    let skip = |ann: Option<&str>, reason: String| {
        log::warn!("skipping {}{}: {reason}", rec.image_id, ann.map(|a| format!("/{a}")).unwrap_or_default());
        if let Ok(mut s) = skipped.lock() {
            s.push(Skip {
                image_id: rec.image_id.clone(),
                annotation_id: ann.map(str::to_string),
                reason,
            });
        }
    };
    if rec.width == 0 || rec.height == 0 {
        skip(None, format!("image size {}×{}", rec.width, rec.height));
        return None;
    }
    let (w, h) = (f64::from(rec.width), f64::from(rec.height));
    let mut kept = Vec::with_capacity(rec.annotations.len());
    for a in std::mem::take(&mut rec.annotations) {
        let [x, y, bw, bh] = a.bbox;
        let ok = a.bbox.iter().all(|v| v.is_finite())
            && bw > 0.0
            && bh > 0.0
            && x >= 0.0
            && y >= 0.0
            && x + bw <= w + 1e-6
            && y + bh <= h + 1e-6;
        if ok {
            kept.push(a);
        } else {
            skip(Some(&a.id), format!("bbox {:?} outside {}×{} image", a.bbox, rec.width, rec.height));
        }
    }
    if kept.is_empty() {
        skip(None, "no valid annotations".into());
        return None;
    }
    rec.annotations = kept;
    Some(rec)
}

struct StreamVisitor<F, T> {
    sink: F,
    _item: std::marker::PhantomData<T>,
}

impl<'de, F, T> Visitor<'de> for StreamVisitor<F, T>
where
    F: FnMut(T) -> bool,
    T: DeserializeOwned,
{
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("an array of images")
    }

    fn visit_seq<A: SeqAccess<'de>>(mut self, mut seq: A) -> std::result::Result<(), A::Error> {
        while let Some(item) = seq.next_element::<T>()? {
            if !(self.sink)(item) {
                break;
            }
        }
        Ok(())
    }
}

/// Numeric or string id, normalised to a string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Id(String);

impl<'de> Deserialize<'de> for Id {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Id, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        Ok(Id(match Raw::deserialize(d)? {
            Raw::N(n) => n.to_string(),
            Raw::S(s) => s,
        }))
    }
}

#[derive(Deserialize)]
struct InstImage {
    id: Id,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct InstAnnotation {
    #[serde(default)]
    id: Option<Id>,
    image_id: Id,
    #[serde(default)]
    category_id: Option<Id>,
    #[serde(default)]
    bbox: Option<[f64; 4]>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    segmentation: Option<serde_json::Value>,
}

#[derive(Deserialize)]
struct InstCategory {
    id: Id,
    name: String,
}

#[derive(Deserialize)]
struct RefSentence {
    sent: String,
}

#[derive(Deserialize)]
struct Ref {
    ref_id: Id,
    ann_id: Id,
    sentences: Vec<RefSentence>,
}

#[derive(Deserialize)]
struct Instances {
    images: Vec<InstImage>,
    annotations: Vec<InstAnnotation>,
    categories: Vec<InstCategory>,
    #[serde(default)]
    refs: Option<Vec<Ref>>,
}

fn parse_instances(bytes: &[u8], format: Format, dataset: &str) -> std::result::Result<Vec<CocoRecord>, serde_json::Error> {
    let inst: Instances = serde_json::from_slice(bytes)?;
    let categories: BTreeMap<Id, String> = inst.categories.into_iter().map(|c| (c.id, c.name)).collect();
    let mut records: BTreeMap<Id, CocoRecord> = BTreeMap::new();
    let mut order = Vec::new();
    for img in inst.images {
        order.push(img.id.clone());
        records.insert(
            img.id.clone(),
            CocoRecord {
                dataset: dataset.to_string(),
                image_id: img.id.0,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
                annotations: Vec::new(),
            },
        );
    }
    let mut image_captions: BTreeMap<Id, String> = BTreeMap::new();
    let mut by_id: BTreeMap<Id, (Id, CocoAnnotation)> = BTreeMap::new();
    let mut objects: Vec<(Id, CocoAnnotation)> = Vec::new();
    for (k, a) in inst.annotations.into_iter().enumerate() {
        match (a.bbox, a.caption) {
            (None, Some(c)) => {
                image_captions.entry(a.image_id).or_insert(c);
            }
            (Some(bbox), caption) => {
                let id = a.id.unwrap_or_else(|| Id(k.to_string()));
                let category = a
                    .category_id
                    .and_then(|c| categories.get(&c).cloned())
                    .unwrap_or_else(|| "object".to_string());
                let ann = CocoAnnotation {
                    id: id.0.clone(),
                    category,
                    bbox,
                    caption,
                    segmentation: a.segmentation,
                };
                by_id.insert(id, (a.image_id.clone(), ann.clone()));
                objects.push((a.image_id, ann));
            }
            (None, None) => {}
        }
    }
    match (format, inst.refs) {
        (Format::RefCoco, Some(refs)) => {
            for r in refs {
                let Some((image, ann)) = by_id.get(&r.ann_id) else {
                    continue;
                };
                for (k, s) in r.sentences.iter().enumerate() {
                    let mut a = ann.clone();
                    a.id = format!("{}-{k}", r.ref_id.0);
                    a.caption = Some(s.sent.clone());
                    if let Some(rec) = records.get_mut(image) {
                        rec.annotations.push(a);
                    }
                }
            }
        }
        (Format::RefCoco, None) => {
            return Err(serde::de::Error::custom("refcoco input needs a `refs` array"));
        }
        _ => {
            for (image, mut a) in objects {
                if a.caption.is_none() {
                    a.caption = image_captions.get(&image).cloned();
                }
                if let Some(rec) = records.get_mut(&image) {
                    rec.annotations.push(a);
                }
            }
        }
    }
    Ok(order.into_iter().filter_map(|id| records.remove(&id)).collect())
}

#[derive(Deserialize)]
struct VgObject {
    object_id: Id,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    names: Vec<String>,
}

#[derive(Deserialize)]
struct VgImage {
    image_id: Id,
    #[serde(default)]
    file_name: Option<String>,
    width: u32,
    height: u32,
    objects: Vec<VgObject>,
}

impl VgImage {
    fn into_record(self, dataset: &str) -> CocoRecord {
        CocoRecord {
            dataset: dataset.to_string(),
            file_name: self.file_name.unwrap_or_else(|| format!("{}.jpg", self.image_id.0)),
            image_id: self.image_id.0,
            width: self.width,
            height: self.height,
            annotations: self
                .objects
                .into_iter()
                .map(|o| CocoAnnotation {
                    id: o.object_id.0,
                    category: o.names.into_iter().next().unwrap_or_else(|| "object".to_string()),
                    bbox: [o.x, o.y, o.w, o.h],
                    caption: None,
                    segmentation: None,
                })
                .collect(),
        }
    }
}

#[derive(Deserialize)]
struct AdeObject {
    id: Id,
    name: String,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct AdeImage {
    image_id: Id,
    file_name: String,
    width: u32,
    height: u32,
    objects: Vec<AdeObject>,
}

fn parse_line(line: &str, format: Format, dataset: &str) -> std::result::Result<CocoRecord, serde_json::Error> {
    match format {
        Format::Records => serde_json::from_str(line),
        _ => {
            let img: AdeImage = serde_json::from_str(line)?;
            Ok(CocoRecord {
                dataset: dataset.to_string(),
                image_id: img.image_id.0,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
                annotations: img
                    .objects
                    .into_iter()
                    .map(|o| CocoAnnotation {
                        id: o.id.0,
                        category: o.name,
                        bbox: o.bbox,
                        caption: None,
                        segmentation: None,
                    })
                    .collect(),
            })
        }
    }
}
