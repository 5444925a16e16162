use std::sync::Arc;

use virtue_core::checkpoint::Checkpoint;
use virtue_core::embedder::{Model, ModelConfig};
use virtue_core::encoders::Image;
use virtue_core::numkernel::ParamStore;
use virtue_core::retrieval::{
    hash_embedding, precision_at_1, EmbeddingIndex, EvalItem, ImageSize, IndexEntry, Negative, NegativeType,
    OracleScorer, RandomScorer, ScarSample, SAMPLE_SCHEMA,
};
use virtue_core::synth::{self, SynthSource};
use virtue_core::trainer::{train, RunDir, TrainConfig};
use virtue_core::Error;

fn small_run(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        chunk_size: 4,
        warmup: 2,
        seed: 3,
        ..TrainConfig::desk()
    }
}

fn max_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .map(|(id, t)| t.max_abs_diff(b.get(id).unwrap()).unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let vocab = synth::vocab();
    let (model, p0) = Model::init(ModelConfig::desk(vocab.len(), 1), vocab).unwrap();
    let straight = train(&model, p0.clone(), &SynthSource, &small_run(6), None, &RunDir::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = train(&model, p0, &SynthSource, &small_run(3), None, &RunDir::default()).unwrap();
    Checkpoint {
        model: model.clone(),
        params: first.params,
        optimizer: Some(first.optimizer),
        train: Some(small_run(3)),
    }
    .save(dir.path())
    .unwrap();
    let ck = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(ck.optimizer.as_ref().unwrap().step, 3);
    let resumed = train(&ck.model, ck.params, &SynthSource, &small_run(6), ck.optimizer, &RunDir::default()).unwrap();
    assert_eq!(resumed.log.first().unwrap().step, 4);
    assert_eq!(max_diff(&straight.params, &resumed.params), 0.0);
    for (a, b) in straight.log[3..].iter().zip(&resumed.log) {
        assert_eq!(a.loss, b.loss);
    }
}

#[test]
fn index_round_trips_and_rejects_other_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut index = EmbeddingIndex::new("model-a", 16);
    for i in 0..50 {
        let entry = IndexEntry {
            id: format!("e{i}"),
            payload: serde_json::json!({ "rank": i }),
        };
        index.push(entry, hash_embedding(&format!("v{i}"), 16, 2)).unwrap();
    }
    index.save(dir.path()).unwrap();
    let loaded = EmbeddingIndex::load(dir.path()).unwrap();
    assert_eq!(loaded.entries(), index.entries());
    for (a, b) in index.vectors().iter().zip(loaded.vectors()) {
        assert!(a.vector().max_abs_diff(b.vector()).unwrap() < 1e-7);
    }
    let q = hash_embedding("v7", 16, 2);
    let hits = loaded.search(&q, 3, "model-a").unwrap();
    assert_eq!(hits[0].id, "e7");
    assert_eq!(hits[0].payload["rank"], 7);
    assert!(matches!(loaded.search(&q, 3, "model-b"), Err(Error::StaleIndex { .. })));
}

fn calibration_items(n: usize) -> Vec<EvalItem> {
    let image = Arc::new(Image::filled(32, 32, [0.5; 3]).unwrap());
    let kinds = [NegativeType::GlobalContext, NegativeType::BackgroundRelation, NegativeType::ObjectSwap];
    (0..n)
        .map(|k| {
            let sample = ScarSample {
                schema: SAMPLE_SCHEMA.to_string(),
                id: format!("mc-{k}"),
                dataset: "mc".into(),
                image: "mc.vimg".into(),
                image_size: ImageSize { width: 32, height: 32 },
                bbox: [4.0, 4.0, 8.0, 8.0],
                gt_caption: format!("caption {k} truth"),
                negatives: (0..9)
                    .map(|j| Negative {
                        text: format!("caption {k} negative {j}"),
                        kind: kinds[j / 3],
                    })
                    .collect(),
            };
            EvalItem::from_sample(&sample, Arc::clone(&image)).unwrap()
        })
        .collect()
}

#[test]
fn oracle_scores_one_and_random_scores_a_tenth() {
    let items = calibration_items(10_000);
    let oracle = precision_at_1(&items, &OracleScorer { dim: 32 }, 0);
    assert_eq!(oracle.scored, 10_000);
    assert_eq!(oracle.overall, 1.0);
    let random = precision_at_1(&items, &RandomScorer { dim: 32, seed: 11 }, 0);
    assert!((random.overall - 0.10).abs() <= 0.02, "{}", random.overall);
}

#[test]
fn random_init_model_ranks_near_chance() {
    let vocab = synth::vocab();
    let (model, p) = Model::init(ModelConfig::desk(vocab.len(), 5), vocab).unwrap();
    let items = synth::eval_items(40, 77).unwrap();
    let report = precision_at_1(&items, &virtue_core::retrieval::ModelScorer { model: &model, params: &p }, 0);
    assert_eq!(report.scored, items.len());
    assert!(report.overall < 0.5, "{}", report.overall);
}
