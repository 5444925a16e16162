use std::time::Instant;

use virtue_core::embedder::{Model, ModelConfig};
use virtue_core::numkernel::{DType, Grads};
use virtue_core::synth::{self, SynthSource};
use virtue_core::trainer::{full_batch_step, grad_cache_step, CachedEmbeddings, PairSource};

const B: usize = 32;

#[test]
fn chunked_gradients_match_full_batch() {
    let started = Instant::now();
    for seed in 0..10 {
        let vocab = synth::vocab();
        let mut cfg = ModelConfig::desk(vocab.len(), seed);
        cfg.dtype = DType::F64;
        let (model, params) = Model::init(cfg, vocab).unwrap();
        let batch = SynthSource.batch(1, B, seed).unwrap();
        assert_eq!(batch.len(), B);
        let meter = model.meter().clone();
        meter.reset_peak();
        let full = full_batch_step(&model, &params, &batch, 0.02, Grads::new()).unwrap();
        assert_eq!(meter.peak(), 2 * B);
        for chunk in [4, 8, 16] {
            meter.reset_peak();
            let cached = grad_cache_step(&model, &params, &batch, 0.02, chunk, Grads::new()).unwrap();
            assert_eq!(meter.peak(), 2 * chunk, "peak activations for chunk {chunk}");
            assert!((cached.loss - full.loss).abs() < 1e-12);
            let diff = cached.grads.max_abs_diff(&full.grads);
            assert!(diff < 1e-6, "seed {seed} chunk {chunk}: max abs diff {diff:e}");
            assert_eq!(cached.grads.len(), full.grads.len());
        }
    }
    assert!(started.elapsed().as_secs() < 300, "{:?}", started.elapsed());
}

#[test]
fn parameters_changed_between_passes_is_rejected() {
    let vocab = synth::vocab();
    let (model, mut params) = Model::init(ModelConfig::desk(vocab.len(), 3), vocab).unwrap();
    let batch = SynthSource.batch(1, 8, 3).unwrap();
    let cached = CachedEmbeddings::compute(&model, &params, &batch, 0.02, 4).unwrap();
    params.get_mut("lm.ln_f.gain").unwrap().data_mut()[0] += 0.5;
    let err = cached.backward(&model, &params, &batch, Grads::new()).unwrap_err();
    assert!(err.to_string().contains("changed"), "{err}");
}

#[test]
fn chunk_must_divide_batch() {
    let vocab = synth::vocab();
    let (model, params) = Model::init(ModelConfig::desk(vocab.len(), 3), vocab).unwrap();
    let batch = SynthSource.batch(1, 8, 3).unwrap();
    assert!(CachedEmbeddings::compute(&model, &params, &batch, 0.02, 3).is_err());
}
