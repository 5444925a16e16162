//! Split directories on disk: `<dir>/<split>.jsonl` with one sample per line
//! and the referenced images under `<dir>/images/`.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use virtue_core::embedder::{EmbedInput, TaskInstruction};
use virtue_core::encoders::{Image, Vocab};
use virtue_core::numkernel::SeededRng;
use virtue_core::retrieval::{EvalItem, ScarSample};
use virtue_core::synth;
use virtue_core::trainer::{Batch, Pair, PairSource};
use virtue_scar::pipeline::{read_jsonl, write_jsonl};

pub const IMAGE_DIR: &str = "images";

/// Path of a sample's image relative to the directory holding its split file.
pub fn image_path(dir: &Path, sample: &ScarSample) -> PathBuf {
    dir.join(IMAGE_DIR).join(&sample.image)
}

/// Directory that holds `split_file`.
pub fn split_dir(split_file: &Path) -> PathBuf {
    split_file.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_split(split_file: &Path) -> Result<Vec<ScarSample>> {
    read_jsonl(split_file).with_context(|| format!("reading {}", split_file.display()))
}

/// `(sample id, reason)` for samples that could not be loaded.
pub type LoadErrors = Vec<(String, String)>;

/// Evaluation items for a split file. Samples whose image cannot be loaded
/// or whose record is malformed are returned separately with the reason.
pub fn load_items(split_file: &Path) -> Result<(Vec<EvalItem>, LoadErrors)> {
    let dir = split_dir(split_file);
    let mut images: BTreeMap<String, Arc<Image>> = BTreeMap::new();
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for sample in read_split(split_file)? {
        let image = match images.get(&sample.image) {
            Some(img) => Arc::clone(img),
            None => match Image::load(&image_path(&dir, &sample)) {
                Ok(img) => {
                    let img = Arc::new(img);
                    images.insert(sample.image.clone(), Arc::clone(&img));
                    img
                }
                Err(e) => {
                    errors.push((sample.id.clone(), e.to_string()));
                    continue;
                }
            },
        };
        match EvalItem::from_sample(&sample, image) {
            Ok(item) => items.push(item),
            Err(e) => errors.push((sample.id.clone(), e.to_string())),
        }
    }
    Ok((items, errors))
}

/// Vocabulary over every candidate caption and both instructions.
pub fn split_vocab(samples: &[ScarSample]) -> Vocab {
    let mut texts: Vec<String> = samples
        .iter()
        .flat_map(|s| s.candidates().into_iter().map(|c| c.text))
        .collect();
    texts.push(TaskInstruction::scar().template);
    texts.push(TaskInstruction::caption().template);
    Vocab::build(texts.iter().map(String::as_str))
}

/// Renders `scenes` synthetic images and writes every entity as a sample of
/// `<dir>/<split>.jsonl`. Returns the split file.
pub fn write_synth_split(dir: &Path, split: &str, scenes: usize, seed: u64) -> Result<PathBuf> {
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images).with_context(|| format!("creating {}", images.display()))?;
    let mut samples = Vec::new();
    for scene in synth::scenes(scenes, seed, split)? {
        scene.image.save_vimg(&images.join(format!("{}.vimg", scene.id)))?;
        for i in 0..scene.placements.len() {
            samples.push(scene.sample(i));
        }
    }
    let file = dir.join(format!("{split}.jsonl"));
    write_jsonl(&file, &samples)?;
    Ok(file)
}

/// Training pairs drawn from a stored split. Each step shuffles the items
/// with a stream keyed by `(seed, step)` and keeps the first `size` whose
/// captions are distinct.
pub struct SplitSource {
    items: Vec<EvalItem>,
}

impl SplitSource {
    pub fn load(split_file: &Path) -> Result<SplitSource> {
        let (items, errors) = load_items(split_file)?;
        for (id, e) in &errors {
            log::warn!("skipping {id}: {e}");
        }
        if items.len() < 2 {
            bail!("{} has fewer than two usable samples", split_file.display());
        }
        Ok(SplitSource { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl PairSource for SplitSource {
    fn batch(&self, step: u64, size: usize, seed: u64) -> virtue_core::Result<Batch> {
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        SeededRng::derive(seed, &format!("split-{step}")).shuffle(&mut order);
        let mut seen = HashSet::new();
        let mut pairs = Vec::with_capacity(size);
        for i in order {
            let item = &self.items[i];
            let Some(gt) = item.gt_text() else { continue };
            if seen.insert(gt.to_string()) {
                pairs.push(Pair {
                    query: item.query_input()?,
                    target: EmbedInput::caption(gt),
                    task: "region_caption".to_string(),
                });
            }
            if pairs.len() == size {
                break;
            }
        }
        if pairs.len() < size {
            return Err(virtue_core::Error::Config(format!(
                "split has only {} distinct captions for a batch of {size}",
                pairs.len()
            )));
        }
        Batch::dedup(pairs)
    }
}
