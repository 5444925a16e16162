//! Synthetic compositional corpus for desk-scale training and evaluation.
//!
//! Each image is a 4×4 grid of 8-pixel tiles over a noisy scene colour.
//! Entities are coloured glyphs placed in tiles; the tile row fixes the
//! relation word. Captions read `<object> <relation> <scene>`. Half of the
//! images hold two different entities in the same row, so their captions
//! differ only in the object and the visual prompt alone tells them apart.

use std::collections::HashSet;
use std::sync::Arc;

use crate::embedder::{EmbedInput, TaskInstruction};
use crate::encoders::{Bbox, Image, Vocab};
use crate::error::Result;
use crate::numkernel::SeededRng;
use crate::retrieval::{EvalItem, ImageSize, Negative, NegativeType, ScarSample, SAMPLE_SCHEMA};
use crate::trainer::{Batch, Pair, PairSource};

pub const TILE: usize = 8;
pub const TILES: usize = 4;
pub const IMAGE_SIDE: usize = TILE * TILES;
pub const DATASET: &str = "synth";
/// Tag carried by items whose image holds a second entity in the same row.
pub const CONFUSABLE: &str = "confusable";
const NOISE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    Square,
    Disk,
    Triangle,
    Ring,
    Cross,
    Diamond,
    Bar,
    Pillar,
}

impl Glyph {
    fn covers(self, u: usize, v: usize) -> bool {
        let (x, y) = (u as f64 + 0.5 - 4.0, v as f64 + 0.5 - 4.0);
        let r = x.hypot(y);
        match self {
            Glyph::Square => (1..7).contains(&u) && (1..7).contains(&v),
            Glyph::Disk => r <= 3.2,
            Glyph::Triangle => (1..7).contains(&v) && x.abs() <= (v as f64) * 0.5,
            Glyph::Ring => (2.0..=3.6).contains(&r),
            Glyph::Cross => (x.abs() < 1.0 || y.abs() < 1.0) && x.abs() < 3.5 && y.abs() < 3.5,
            Glyph::Diamond => x.abs() + y.abs() <= 3.5,
            Glyph::Bar => (2..6).contains(&v),
            Glyph::Pillar => (2..6).contains(&u),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EntityClass {
    pub name: &'static str,
    pub color: [f64; 3],
    pub glyph: Glyph,
}

pub const ENTITIES: [EntityClass; 8] = [
    EntityClass { name: "red cube", color: [0.9, 0.1, 0.1], glyph: Glyph::Square },
    EntityClass { name: "blue ball", color: [0.1, 0.2, 0.95], glyph: Glyph::Disk },
    EntityClass { name: "orange cone", color: [1.0, 0.55, 0.0], glyph: Glyph::Triangle },
    EntityClass { name: "purple ring", color: [0.55, 0.1, 0.7], glyph: Glyph::Ring },
    EntityClass { name: "black cross", color: [0.02, 0.02, 0.02], glyph: Glyph::Cross },
    EntityClass { name: "pink diamond", color: [1.0, 0.45, 0.75], glyph: Glyph::Diamond },
    EntityClass { name: "cyan bar", color: [0.0, 0.85, 0.85], glyph: Glyph::Bar },
    EntityClass { name: "brown pillar", color: [0.5, 0.3, 0.08], glyph: Glyph::Pillar },
];

#[derive(Debug, Clone, Copy)]
pub struct SceneClass {
    pub phrase: &'static str,
    pub color: [f64; 3],
}

pub const SCENES: [SceneClass; 4] = [
    SceneClass { phrase: "in a meadow", color: [0.35, 0.7, 0.3] },
    SceneClass { phrase: "on a beach", color: [0.92, 0.82, 0.55] },
    SceneClass { phrase: "at night", color: [0.1, 0.12, 0.35] },
    SceneClass { phrase: "in the snow", color: [0.96, 0.96, 0.98] },
];

/// Relation word by tile row, top to bottom.
pub const RELATIONS: [&str; 4] = ["floating", "hovering", "standing", "lying"];

pub fn caption(entity: usize, row: usize, scene: usize) -> String {
    format!("{} {} {}", ENTITIES[entity].name, RELATIONS[row], SCENES[scene].phrase)
}

/// Every caption the corpus can produce plus both instruction texts.
pub fn vocab() -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    for e in 0..ENTITIES.len() {
        for r in 0..RELATIONS.len() {
            for s in 0..SCENES.len() {
                texts.push(caption(e, r, s));
            }
        }
    }
    texts.push(TaskInstruction::scar().template);
    texts.push(TaskInstruction::caption().template);
    Vocab::build(texts.iter().map(String::as_str))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub entity: usize,
    pub row: usize,
    pub col: usize,
}

/// One rendered image with its entities.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub id: String,
    pub scene: usize,
    pub placements: Vec<Placement>,
    pub image: Arc<Image>,
}

impl SynthScene {
    /// Draws a scene; with probability one half a second entity of another
    /// class shares the first entity's row.
    pub fn generate(id: &str, rng: &mut SeededRng) -> Result<SynthScene> {
        let scene = rng.index(SCENES.len());
        let row = rng.index(TILES);
        let col = rng.index(TILES);
        let entity = rng.index(ENTITIES.len());
        let mut placements = vec![Placement { entity, row, col }];
        if rng.uniform() < 0.5 {
            let other = (entity + 1 + rng.index(ENTITIES.len() - 1)) % ENTITIES.len();
            let other_col = (col + 1 + rng.index(TILES - 1)) % TILES;
            placements.push(Placement {
                entity: other,
                row,
                col: other_col,
            });
        }
        let image = render(scene, &placements, rng)?;
        Ok(SynthScene {
            id: id.to_string(),
            scene,
            placements,
            image: Arc::new(image),
        })
    }

    pub fn confusable(&self) -> bool {
        self.placements.len() > 1
    }

    pub fn caption(&self, i: usize) -> String {
        let p = self.placements[i];
        caption(p.entity, p.row, self.scene)
    }

    pub fn bbox(&self, i: usize) -> Bbox {
        let p = self.placements[i];
        Bbox::new((p.col * TILE) as f64, (p.row * TILE) as f64, TILE as f64, TILE as f64)
    }

    pub fn sample_id(&self, i: usize) -> String {
        format!("{}-{i}", self.id)
    }

    /// Benchmark record for entity `i` with three swaps of each element.
    /// Other scenes and relations are exhaustive; object swaps start with
    /// the co-occurring entity when there is one.
    pub fn sample(&self, i: usize) -> ScarSample {
        let p = self.placements[i];
        let mut rng = SeededRng::derive(0, &self.sample_id(i));
        let mut negatives = Vec::with_capacity(9);
        for s in (0..SCENES.len()).filter(|&s| s != self.scene) {
            negatives.push(Negative {
                text: caption(p.entity, p.row, s),
                kind: NegativeType::GlobalContext,
            });
        }
        for r in (0..RELATIONS.len()).filter(|&r| r != p.row) {
            negatives.push(Negative {
                text: caption(p.entity, r, self.scene),
                kind: NegativeType::BackgroundRelation,
            });
        }
        let mut swaps: Vec<usize> = self
            .placements
            .iter()
            .filter(|q| q.entity != p.entity)
            .map(|q| q.entity)
            .collect();
        let mut rest: Vec<usize> = (0..ENTITIES.len()).filter(|e| *e != p.entity && !swaps.contains(e)).collect();
        rng.shuffle(&mut rest);
        swaps.extend(rest);
        for &e in swaps.iter().take(3) {
            negatives.push(Negative {
                text: caption(e, p.row, self.scene),
                kind: NegativeType::ObjectSwap,
            });
        }
        ScarSample {
            schema: SAMPLE_SCHEMA.to_string(),
            id: self.sample_id(i),
            dataset: DATASET.to_string(),
            image: format!("{}.vimg", self.id),
            image_size: ImageSize {
                width: IMAGE_SIDE as u32,
                height: IMAGE_SIDE as u32,
            },
            bbox: [
                self.bbox(i).x_min,
                self.bbox(i).y_min,
                self.bbox(i).width,
                self.bbox(i).height,
            ],
            gt_caption: self.caption(i),
            negatives,
        }
    }

    pub fn eval_item(&self, i: usize) -> Result<EvalItem> {
        let mut item = EvalItem::from_sample(&self.sample(i), Arc::clone(&self.image))?;
        if self.confusable() {
            item.tags.push(CONFUSABLE.to_string());
        }
        Ok(item)
    }

    /// Box-prompted query paired with its caption.
    pub fn pair(&self, i: usize) -> Result<Pair> {
        Ok(Pair {
            query: self.eval_item(i)?.query_input()?,
            target: EmbedInput::caption(&self.caption(i)),
            task: "region_caption".to_string(),
        })
    }
}

fn render(scene: usize, placements: &[Placement], rng: &mut SeededRng) -> Result<Image> {
    let bg = SCENES[scene].color;
    let mut data = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE * 3);
    for _ in 0..IMAGE_SIDE * IMAGE_SIDE {
        for c in bg {
            data.push((c + rng.range(-NOISE, NOISE)).clamp(0.0, 1.0));
        }
    }
    let mut img = Image::new(IMAGE_SIDE, IMAGE_SIDE, data)?;
    for p in placements {
        let class = ENTITIES[p.entity];
        for v in 0..TILE {
            for u in 0..TILE {
                if class.glyph.covers(u, v) {
                    img.set_pixel(p.row * TILE + v, p.col * TILE + u, class.color);
                }
            }
        }
    }
    Ok(img)
}

/// `n` scenes drawn from a stream keyed by `seed`.
pub fn scenes(n: usize, seed: u64, label: &str) -> Result<Vec<SynthScene>> {
    let mut rng = SeededRng::derive(seed, label);
    (0..n)
        .map(|k| SynthScene::generate(&format!("{label}-{k:05}"), &mut rng))
        .collect()
}

/// Evaluation items for every entity of `n` scenes.
pub fn eval_items(n: usize, seed: u64) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for s in scenes(n, seed, "eval")? {
        for i in 0..s.placements.len() {
            items.push(s.eval_item(i)?);
        }
    }
    Ok(items)
}

/// Training pairs drawn fresh for every step. Both entities of a
/// two-entity image enter the same batch, and captions never repeat
/// within a batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct SynthSource;

impl PairSource for SynthSource {
    fn batch(&self, step: u64, size: usize, seed: u64) -> Result<Batch> {
        let label = format!("train-{step}");
        let mut rng = SeededRng::derive(seed, &label);
        let mut seen = HashSet::new();
        let mut pairs = Vec::with_capacity(size);
        let mut k = 0;
        while pairs.len() < size {
            let scene = SynthScene::generate(&format!("{label}-{k}"), &mut rng)?;
            k += 1;
            for i in 0..scene.placements.len() {
                if pairs.len() < size && seen.insert(scene.caption(i)) {
                    pairs.push(scene.pair(i)?);
                }
            }
        }
        Batch::dedup(pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_caption_is_in_vocabulary() {
        let v = vocab();
        let s = SynthScene::generate("x", &mut SeededRng::new(3)).unwrap();
        for n in s.sample(0).candidates() {
            assert!(!v.encode(&n.text).contains(&crate::encoders::UNK));
        }
    }

    #[test]
    fn samples_are_well_formed() {
        for s in scenes(40, 1, "t").unwrap() {
            for i in 0..s.placements.len() {
                s.sample(i).validate().unwrap();
            }
            if s.confusable() {
                let other = s.caption(1);
                assert!(s.sample(0).negatives.iter().any(|n| n.text == other));
            }
        }
    }

    #[test]
    fn batches_are_full_and_repeatable() {
        let a = SynthSource.batch(7, 32, 5).unwrap();
        let b = SynthSource.batch(7, 32, 5).unwrap();
        assert_eq!(a.len(), 32);
        let texts = |x: &Batch| x.pairs().iter().map(|p| p.target.text.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&a), texts(&b));
    }
}
