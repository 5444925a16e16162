//! Trains the desk model on the synthetic corpus and reports precision@1.
//!
//! Usage: `cargo run --release -p virtue-core --example desk_train -- [steps] [seed]`

use std::time::Instant;

use virtue_core::embedder::{Model, ModelConfig};
use virtue_core::retrieval::{precision_at_1, EvalItem, ModelScorer};
use virtue_core::synth::{self, SynthSource, CONFUSABLE};
use virtue_core::trainer::{train, RunDir, TrainConfig};

fn main() -> virtue_core::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(600);
    let seed = args.get(1).copied().unwrap_or(0);
    let vocab = synth::vocab();
    let (model, params) = Model::init(ModelConfig::desk(vocab.len(), seed), vocab)?;
    let cfg = TrainConfig {
        steps,
        seed,
        lr: std::env::var("DESK_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(TrainConfig::desk().lr),
        ..TrainConfig::desk()
    };
    let started = Instant::now();
    let out = train(&model, params, &SynthSource, &cfg, None, &RunDir::default())?;
    for l in out.log.iter().filter(|l| l.step % 50 == 0 || l.step == 1) {
        println!("step {:5} loss {:.4} lr {:.1e} t {:.1}s", l.step, l.loss, l.lr, l.wallclock);
    }
    println!("trained {steps} steps in {:.1}s", started.elapsed().as_secs_f64());
    let items = synth::eval_items(150, seed + 1000)?;
    let confusable: Vec<EvalItem> = items.iter().filter(|i| i.tags.iter().any(|t| t == CONFUSABLE)).cloned().collect();
    let scorer = ModelScorer { model: &model, params: &out.params };
    let ablated = model.ablated();
    let ablated_scorer = ModelScorer { model: &ablated, params: &out.params };
    println!("overall {:.3} ({} items)", precision_at_1(&items, &scorer, 0).overall, items.len());
    println!("confusable {:.3} ({} items)", precision_at_1(&confusable, &scorer, 0).overall, confusable.len());
    println!("ablated confusable {:.3}", precision_at_1(&confusable, &ablated_scorer, 0).overall);
    let mut confusion = std::collections::BTreeMap::new();
    for sc in synth::scenes(150, seed + 1000, "eval")? {
        for i in 0..sc.placements.len() {
            let sample = sc.sample(i);
            let item = sc.eval_item(i)?;
            let ranked = virtue_core::retrieval::retrieve_candidates(&model, &out.params, &item.query_input()?, &sample.candidates())?;
            let top = ranked[0].index;
            let key = if top == 0 { "correct".to_string() } else { format!("{:?}", sample.negatives[top - 1].kind) };
            *confusion.entry((sc.confusable(), key)).or_insert(0) += 1;
        }
    }
    println!("{confusion:?}");
    Ok(())
}
