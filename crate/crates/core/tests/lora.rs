use std::sync::Arc;

use virtue_core::embedder::{EmbedInput, LanguageModel, LmConfig, Model, ModelConfig, Side, TaskInstruction};
use virtue_core::encoders::{Image, VisualPrompt};
use virtue_core::numkernel::{DType, ParamStore, SeededRng};
use virtue_core::synth;

fn randomize_adapters(lm: &LanguageModel, p: &mut ParamStore, rng: &mut SeededRng) {
    for id in lm.adapter_ids() {
        let shape = p.get(&id).unwrap().shape().to_vec();
        p.insert(id, rng.normal_tensor(&shape, 0.2));
    }
}

#[test]
fn zero_adapters_reproduce_base_exactly() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        let cfg = LmConfig::desk(40);
        let adapted = LanguageModel::init(&mut p, &mut rng, cfg).unwrap();
        let base = LanguageModel::new(cfg, false).unwrap();
        for id in adapted.adapter_ids().iter().filter(|id| id.ends_with(".b")) {
            assert!(p.get(id).unwrap().data().iter().all(|v| *v == 0.0), "{id} starts non-zero");
        }
        let x = rng.normal_tensor(&[7, cfg.d], 1.0);
        let (ha, _) = adapted.forward(&p, &x).unwrap();
        let (hb, _) = base.forward(&p, &x).unwrap();
        assert_eq!(ha.data(), hb.data());
    }
}

#[test]
fn merged_weights_match_adapter_path() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed);
        let mut p = ParamStore::new();
        let cfg = LmConfig::desk(40);
        let lm = LanguageModel::init(&mut p, &mut rng, cfg).unwrap();
        randomize_adapters(&lm, &mut p, &mut rng);
        let (merged, mp) = lm.merged(&p).unwrap();
        assert!(lm.adapter_ids().iter().all(|id| !mp.contains(id)));
        let x = rng.normal_tensor(&[9, cfg.d], 1.0);
        let (h1, _) = lm.forward(&p, &x).unwrap();
        let (h2, _) = merged.forward(&mp, &x).unwrap();
        let diff = h1.max_abs_diff(&h2).unwrap();
        assert!(diff < 1e-10, "seed {seed}: {diff:e}");
    }
}

#[test]
fn merged_model_embeds_the_same() {
    let vocab = synth::vocab();
    let mut cfg = ModelConfig::desk(vocab.len(), 2);
    cfg.dtype = DType::F64;
    let (model, mut p) = Model::init(cfg, vocab).unwrap();
    randomize_adapters(model.lm(), &mut p, &mut SeededRng::new(9));
    let (lm, mp) = model.lm().merged(&p).unwrap();
    let merged = model.with_lm(lm);
    let mut rng = SeededRng::new(4);
    let image = Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.uniform()).collect()).unwrap();
    let input = EmbedInput {
        side: Side::Query,
        image: Some(Arc::new(image)),
        prompt: Some(VisualPrompt::boxed(0.0, 0.25, 0.25, 0.25)),
        instruction: TaskInstruction::scar(),
        bbox_text: Some("[0.00, 8.00, 8.00, 8.00]".into()),
        text: None,
    };
    let a = model.embed(&p, &input).unwrap();
    let b = merged.embed(&mp, &input).unwrap();
    let diff = a.vector().max_abs_diff(b.vector()).unwrap();
    assert!(diff < 1e-10, "{diff:e}");
}
