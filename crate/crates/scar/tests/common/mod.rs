#![allow(dead_code)]

use std::path::PathBuf;

use virtue_core::retrieval::{ImageSize, Negative, NegativeType, ScarSample, SAMPLE_SCHEMA};
use virtue_scar::Lexicon;

pub fn lexicon_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/lexicon/data.noun")
}

pub fn lexicon() -> Lexicon {
    Lexicon::load(&lexicon_path()).expect("lexicon fixture")
}

pub fn sample(id: &str, gt: &str, negatives: &[(&str, NegativeType)]) -> ScarSample {
    ScarSample {
        schema: SAMPLE_SCHEMA.to_string(),
        id: id.to_string(),
        dataset: "refcoco+".to_string(),
        image: format!("{id}.jpg"),
        image_size: ImageSize { width: 640, height: 427 },
        bbox: [100.0, 100.0, 200.0, 150.0],
        gt_caption: gt.to_string(),
        negatives: negatives
            .iter()
            .map(|(t, k)| Negative { text: t.to_string(), kind: *k })
            .collect(),
    }
}

use NegativeType::{BackgroundRelation as R, GlobalContext as G, ObjectSwap as O};

fn nine(gt: &str, lines: [&str; 9]) -> (String, Vec<(String, NegativeType)>) {
    let kinds = [G, G, G, R, R, R, O, O, O];
    (gt.to_string(), lines.iter().zip(kinds).map(|(l, k)| (l.to_string(), k)).collect())
}

fn build(id: &str, (gt, negs): (String, Vec<(String, NegativeType)>)) -> ScarSample {
    let refs: Vec<(&str, NegativeType)> = negs.iter().map(|(t, k)| (t.as_str(), *k)).collect();
    sample(id, &gt, &refs)
}

pub fn motorcycle() -> ScarSample {
    build(
        "motorcycle",
        nine(
            "Motorcycle in forefront fully shown.",
            [
                "Motorcycle in the garage fully shown.",
                "Motorcycle on a racetrack fully shown.",
                "Motorcycle in a field fully shown.",
                "Motorcycle with a helmet placed on the seat in forefront.",
                "Motorcycle being washed in forefront.",
                "Motorcycle loaded with packages in forefront.",
                "Bicycle in forefront fully shown.",
                "Scooter in forefront fully shown.",
                "Horse in forefront fully shown.",
            ],
        ),
    )
}

pub fn bench() -> ScarSample {
    build(
        "bench",
        nine(
            "The bench closest to the palm tree and on a concrete pedestal at the beach.",
            [
                "The bench closest to the palm tree and on a concrete pedestal in a city bus station.",
                "The bench closest to the palm tree and on a concrete pedestal in a shopping mall atrium.",
                "The bench closest to the palm tree and on a concrete pedestal in a hospital waiting area.",
                "The bench with a row of flower pots on its seat and on a concrete pedestal at the beach.",
                "The bench covered in colorful graffiti and on a concrete pedestal at the beach.",
                "The bench holding a stack of books and on a concrete pedestal at the beach.",
                "The playground slide closest to the palm tree and on a concrete pedestal at the beach.",
                "The trash can closest to the palm tree and on a concrete pedestal at the beach.",
                "The bicycle rack closest to the palm tree and on a concrete pedestal at the beach.",
            ],
        ),
    )
}

pub fn cat() -> ScarSample {
    build(
        "cat",
        nine(
            "Cat sitting in front of a computer screen.",
            [
                "Cat sitting on a kitchen countertop.",
                "Cat sitting in a garden.",
                "Cat sitting on a window sill.",
                "Cat pawing at a coffee cup in front of a computer screen.",
                "Cat curled up sleeping in front of a computer screen.",
                "Cat playing with headphones in front of a computer screen.",
                "Rabbit sitting in front of a computer screen.",
                "Dog sitting in front of a computer screen.",
                "Parrot sitting in front of a computer screen.",
            ],
        ),
    )
}

pub fn fan() -> ScarSample {
    build(
        "fan",
        nine(
            "Fan standing near the chairs in a glass-roofed lounge.",
            [
                "Fan standing near the chairs on a subway platform.",
                "Fan standing near the chairs in a hospital waiting area.",
                "Fan standing near the chairs in a gymnasium.",
                "Fan blowing onto a group of potted plants in a glass-roofed lounge.",
                "Fan hanging from the ceiling above the chairs in a glass-roofed lounge.",
                "Fan surrounded by scattered magazines on the floor in a glass-roofed lounge.",
                "Sculpture standing near the chairs in a glass-roofed lounge.",
                "Lamp standing near the chairs in a glass-roofed lounge.",
                "Plant standing near the chairs in a glass-roofed lounge.",
            ],
        ),
    )
}

/// Relation negatives only insert words, so no relation is found.
pub fn sculpture_mouth() -> ScarSample {
    build(
        "mouth",
        nine(
            "Mouth of sculpture by the waterfront.",
            [
                "Mouth of sculpture in a museum gallery.",
                "Mouth of sculpture in a lush garden.",
                "Mouth of sculpture on a mountaintop.",
                "Mouth of sculpture blowing smoke by the waterfront.",
                "Mouth of sculpture illuminated by spotlights by the waterfront.",
                "Mouth of sculpture eating an apple by the waterfront.",
                "Fin of sculpture by the waterfront.",
                "Ear of sculpture by the waterfront.",
                "Tail of sculpture by the waterfront.",
            ],
        ),
    )
}

/// One negative removed.
pub fn eight_negatives() -> ScarSample {
    let mut s = motorcycle();
    s.id = "eight".into();
    s.negatives.remove(8);
    s
}

/// Two identical object swaps.
pub fn duplicate_within_type() -> ScarSample {
    let mut s = motorcycle();
    s.id = "duplicate".into();
    s.negatives[7].text = s.negatives[6].text.clone();
    s
}

/// The traffic light sample with an object swap to a synonym.
pub fn stoplight_swap() -> ScarSample {
    let mut s = motorcycle();
    s.id = "stoplight".into();
    s.gt_caption = s.gt_caption.replace("Motorcycle", "Traffic light");
    for n in &mut s.negatives {
        n.text = n.text.replace("Motorcycle", "Traffic light");
    }
    s.negatives[6].text = "Stoplight in forefront fully shown.".into();
    s
}

/// Ground truth without a scene; scene negatives only append one.
pub fn sceneless() -> ScarSample {
    build(
        "sceneless",
        nine(
            "Motorcycle fully shown.",
            [
                "Motorcycle fully shown in the garage.",
                "Motorcycle fully shown on a racetrack.",
                "Motorcycle fully shown in a field.",
                "Motorcycle with a helmet placed on the seat.",
                "Motorcycle being washed.",
                "Motorcycle loaded with packages.",
                "Bicycle fully shown.",
                "Scooter fully shown.",
                "Horse fully shown.",
            ],
        ),
    )
}
