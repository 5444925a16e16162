mod common;

use std::collections::BTreeSet;
use std::path::Path;

use virtue_core::retrieval::ScarSample;
use virtue_scar::pipeline::{read_jsonl, sample_order, thousands, Stats, REVIEW_QUEUE_FILE, SAMPLE_UNIT};
use virtue_scar::{emit, filter_all, generate, stats, CocoAnnotation, CocoRecord, GenerateOptions, MockClient, RetryPolicy, RuleExtractor, Split};

const CATEGORIES: [&str; 6] = ["dog", "cat", "car", "bowl", "person", "sofa"];

/// Ten images with 1..=7 objects each.
fn desk_records() -> Vec<CocoRecord> {
    (0..10)
        .map(|i| CocoRecord {
            dataset: if i < 6 { "coco".into() } else { "vg".into() },
            image_id: (100 - i * 7).to_string(),
            file_name: format!("img{i}.jpg"),
            width: 320,
            height: 240,
            annotations: (0..(i % 7 + 1))
                .map(|k| CocoAnnotation {
                    id: (k * 3 + 1).to_string(),
                    category: CATEGORIES[(i + k) % CATEGORIES.len()].into(),
                    bbox: [k as f64 * 10.0, 5.0, 30.0, 40.0],
                    caption: (k % 2 == 0).then(|| format!("{} resting near the wall in a bright room.", CATEGORIES[(i + k) % 6])),
                    segmentation: None,
                })
                .collect(),
        })
        .collect()
}

fn run(dir: &Path, seed: u64) -> Vec<ScarSample> {
    let opts = GenerateOptions { policy: RetryPolicy::immediate(), ..GenerateOptions::new(seed) };
    let generated = generate(desk_records().into_iter().map(Ok), &MockClient::new(seed), &opts).unwrap();
    assert!(generated.dropped.is_empty(), "{:?}", generated.dropped);
    let filtered = filter_all(generated.samples, &RuleExtractor, &common::lexicon()).unwrap();
    let (eval, train): (Vec<_>, Vec<_>) = filtered.passed.into_iter().partition(|s| s.dataset == "vg");
    emit(&train, Split::Train, dir).unwrap();
    emit(&eval, Split::Eval, dir).unwrap();
    let mut all = train;
    all.extend(eval);
    all
}

#[test]
fn desk_fixture_totals_match_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let samples = run(dir.path(), 5);
    // objects per image: i % 7 + 1 for i in 0..10 = 1 2 3 4 5 6 7 1 2 3, capped at 5
    // coco (i < 6): 1+2+3+4+5+5 = 20 annotations, 6 images
    // vg: 5+1+2+3 = 11 annotations, 4 images
    assert_eq!(samples.len(), 31);
    let s = Stats::from_dir(dir.path()).unwrap();
    let coco = s.rows.iter().find(|r| r.dataset == "COCO-Stuff").unwrap();
    let vg = s.rows.iter().find(|r| r.dataset == "VisualGenome").unwrap();
    assert_eq!((coco.train.images, coco.train.annotations), (6, 20));
    assert_eq!((vg.eval.images, vg.eval.annotations), (4, 11));
    assert_eq!((s.total.train.annotations, s.total.eval.annotations), (20, 11));
    assert_eq!((s.total.train.images, s.total.eval.images), (6, 4));
    assert_eq!(s.unit, SAMPLE_UNIT);
}

#[test]
fn stats_table_has_the_reference_layout() {
    let s = stats(&[], &[]);
    let names: Vec<&str> = s.rows.iter().map(|r| r.dataset.as_str()).collect();
    assert_eq!(names, ["RefCOCOg", "RefCOCO+", "COCO-Stuff", "VisualGenome", "ADE20K"]);
    let table = s.table();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("Train") && lines[0].contains("Evaluation"));
    assert_eq!(lines[1].matches("#Images").count(), 2);
    assert_eq!(lines[1].matches("#Annotations").count(), 2);
    assert!(lines[7].starts_with("Total"));
    assert_eq!(thousands(47145), "47,145");
}

#[test]
fn rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path(), 11);
    run(b.path(), 11);
    for f in ["train.jsonl", "eval.jsonl", REVIEW_QUEUE_FILE] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // rerunning into the same directory leaves it unchanged
    run(a.path(), 11);
    assert_eq!(std::fs::read(a.path().join("train.jsonl")).unwrap(), std::fs::read(b.path().join("train.jsonl")).unwrap());
}

#[test]
fn emitted_samples_are_ordered_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), 2);
    let train: Vec<ScarSample> = read_jsonl(&dir.path().join("train.jsonl")).unwrap();
    for s in &train {
        s.validate().unwrap();
        assert_eq!(s.schema, "scar-sample/1");
    }
    assert!(train.windows(2).all(|w| sample_order(&w[0], &w[1]).is_lt()));
    let images: Vec<u64> = train.iter().map(|s| s.id.split(':').nth(1).unwrap().parse().unwrap()).collect();
    assert!(images.windows(2).all(|w| w[0] <= w[1]), "{images:?}");
}

#[test]
fn review_queue_only_for_eval() {
    let dir = tempfile::tempdir().unwrap();
    let s = common::motorcycle();
    let out = emit(std::slice::from_ref(&s), Split::Train, dir.path()).unwrap();
    assert!(out.review_queue.is_none());
    assert!(!dir.path().join(REVIEW_QUEUE_FILE).exists());
    let out = emit(std::slice::from_ref(&s), Split::Eval, dir.path()).unwrap();
    assert_eq!(out.review_queue, Some(dir.path().join(REVIEW_QUEUE_FILE)));
    let queue: Vec<serde_json::Value> = read_jsonl(&dir.path().join(REVIEW_QUEUE_FILE)).unwrap();
    assert_eq!(queue.len(), 1);
    assert_eq!(queue[0]["sample_id"], "motorcycle");
}

#[test]
fn invalid_samples_are_not_emitted() {
    let dir = tempfile::tempdir().unwrap();
    let err = emit(&[common::eight_negatives()], Split::Train, dir.path()).unwrap_err();
    assert!(err.to_string().contains("eight"), "{err}");
}

#[test]
fn generation_is_independent_of_record_order() {
    let opts = GenerateOptions { policy: RetryPolicy::immediate(), ..GenerateOptions::new(4) };
    let mock = MockClient::new(4);
    let a = generate(desk_records().into_iter().map(Ok), &mock, &opts).unwrap().samples;
    let b = generate(desk_records().into_iter().rev().map(Ok), &mock, &opts).unwrap().samples;
    let ids = |v: &[ScarSample]| v.iter().map(|s| serde_json::to_string(s).unwrap()).collect::<BTreeSet<_>>();
    assert_eq!(ids(&a), ids(&b));
}
