//! End-to-end embedder: segmentation streamline, vision streamline and text
//! feed the adapted language model, whose last hidden state is pooled.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::lm::{LanguageModel, LmCache, LmConfig, EMBED_TABLE};
use super::sequence::{assemble, pool_last, pool_last_backward, PoolCache, Segment, TaskInstruction, UnitEmbedding};
use crate::connector::{Connector, ConnectorCache, ConnectorConfig};
use crate::encoders::{
    embed_backward, embed_ids, sample_uniform_points, Image, SegCache, SegConfig, SegModel, VisionCache,
    VisionConfig, VisionEncoder, VisualPrompt, Vocab,
};
use crate::error::{Error, Result};
use crate::numkernel::{DType, Grads, ParamStore, SeededRng, Tensor};

/// Which parts of the model are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Adapters and connector only; encoders and base LM stay at their
    /// initial weights.
    Faithful,
    /// Also trains the toy segmentation and vision encoders.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seed: u64,
    pub dtype: DType,
    pub mode: TrainMode,
    /// Points sampled when an image comes without a prompt.
    pub sampled_points: usize,
    /// Replace every prompt by the sampled points (ablation).
    pub ablate_prompts: bool,
    pub seg: SegConfig,
    pub vision: VisionConfig,
    pub connector: ConnectorConfig,
    pub lm: LmConfig,
}

impl ModelConfig {
    pub fn desk(vocab: usize, seed: u64) -> ModelConfig {
        let lm = LmConfig::desk(vocab);
        let seg = SegConfig::desk();
        ModelConfig {
            seed,
            dtype: DType::F32,
            mode: TrainMode::Desk,
            sampled_points: 9,
            ablate_prompts: false,
            seg,
            vision: VisionConfig::desk(lm.d),
            connector: ConnectorConfig::new(seg.grid, seg.width, lm.d),
            lm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seg.validate()?;
        self.vision.validate()?;
        self.lm.validate()?;
        self.connector.tokens()?;
        let c = &self.connector;
        if c.grid != self.seg.grid || c.d_s != self.seg.width || c.d != self.lm.d || self.vision.out != self.lm.d {
            return Err(Error::Config(
                "connector, vision and language model widths disagree".into(),
            ));
        }
        sample_uniform_points(self.sampled_points)?;
        Ok(())
    }
}

/// Counts live backward tapes; `peak` is the high-water mark.
#[derive(Debug, Default)]
pub struct ActivationMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ActivationMeter {
    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::SeqCst);
    }

    fn enter(self: &Arc<Self>) -> MeterGuard {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        MeterGuard(Arc::clone(self))
    }
}

struct MeterGuard(Arc<ActivationMeter>);

impl Drop for MeterGuard {
    fn drop(&mut self) {
        self.0.current.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Target,
}

/// Everything one embedding call consumes.
#[derive(Debug, Clone)]
pub struct EmbedInput {
    pub side: Side,
    pub image: Option<Arc<Image>>,
    pub prompt: Option<VisualPrompt>,
    pub instruction: TaskInstruction,
    /// Fills the instruction's `{bbox}` slot.
    pub bbox_text: Option<String>,
    pub text: Option<String>,
}

impl EmbedInput {
    /// Text-only caption target.
    pub fn caption(text: &str) -> EmbedInput {
        EmbedInput {
            side: Side::Target,
            image: None,
            prompt: None,
            instruction: TaskInstruction::caption(),
            bbox_text: None,
            text: Some(text.to_string()),
        }
    }

    /// Instruction followed by the free text.
    pub fn full_text(&self) -> Result<String> {
        let head = self.instruction.render(self.bbox_text.as_deref())?;
        Ok(match &self.text {
            Some(t) if !t.trim().is_empty() => format!("{head} {t}"),
            _ => head,
        })
    }
}

/// Backward state of one embedding.
pub struct Tape {
    seg: Option<(SegCache, ConnectorCache)>,
    vision: Option<VisionCache>,
    text_ids: Vec<usize>,
    spans: [std::ops::Range<usize>; 3],
    lm: LmCache,
    pool: PoolCache,
    _guard: MeterGuard,
}

impl Tape {
    /// Rows of the language-model input held by a segment (empty when absent).
    pub fn span(&self, seg: Segment) -> std::ops::Range<usize> {
        match seg {
            Segment::Seg => self.spans[0].clone(),
            Segment::Vision => self.spans[1].clone(),
            Segment::Text => self.spans[2].clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocab,
    seg: SegModel,
    vision: VisionEncoder,
    connector: Connector,
    lm: LanguageModel,
    meter: Arc<ActivationMeter>,
}

impl Model {
    /// Structure only; parameters live in a [`ParamStore`].
    pub fn new(cfg: ModelConfig, vocab: Vocab, adapters: bool) -> Result<Model> {
        cfg.validate()?;
        if vocab.len() != cfg.lm.vocab {
            return Err(Error::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                cfg.lm.vocab
            )));
        }
        Ok(Model {
            cfg,
            vocab,
            seg: SegModel::new(cfg.seg)?,
            vision: VisionEncoder::new(cfg.vision)?,
            connector: Connector::new(cfg.connector)?,
            lm: LanguageModel::new(cfg.lm, adapters)?,
            meter: Arc::default(),
        })
    }

    /// Seeded initialisation of every component, cast to the configured
    /// precision.
    pub fn init(cfg: ModelConfig, vocab: Vocab) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let seed = cfg.seed;
        SegModel::init(&mut p, &mut SeededRng::derive(seed, "seg"), cfg.seg)?;
        VisionEncoder::init(&mut p, &mut SeededRng::derive(seed, "vision"), cfg.vision)?;
        Connector::init(&mut p, &mut SeededRng::derive(seed, "connector"), cfg.connector)?;
        LanguageModel::init(&mut p, &mut SeededRng::derive(seed, "lm"), cfg.lm)?;
        let model = Model::new(cfg, vocab, true)?;
        Ok((model, p.cast(cfg.dtype)))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn lm(&self) -> &LanguageModel {
        &self.lm
    }

    pub fn meter(&self) -> &Arc<ActivationMeter> {
        &self.meter
    }

    /// Copy that evaluates the language model with merged weights; pair it
    /// with the store from [`LanguageModel::merged`].
    pub fn with_lm(&self, lm: LanguageModel) -> Model {
        Model { lm, ..self.clone() }
    }

    /// Same structure with prompts replaced by sampled points.
    pub fn ablated(&self) -> Model {
        let mut m = self.clone();
        m.cfg.ablate_prompts = true;
        m
    }

    /// Parameters updated by training under the configured mode.
    pub fn trainable_ids(&self, p: &ParamStore) -> BTreeSet<String> {
        let fixed: BTreeSet<String> = SegModel::fixed_ids().into_iter().collect();
        let adapters: BTreeSet<String> = self.lm.adapter_ids().into_iter().collect();
        p.ids()
            .filter(|id| !fixed.contains(*id))
            .filter(|id| {
                adapters.contains(*id)
                    || id.starts_with("connector.")
                    || (self.cfg.mode == TrainMode::Desk
                        && (id.starts_with("seg.") || id.starts_with("vision.")))
            })
            .cloned()
            .collect()
    }

    fn resolve_prompt(&self, image: &Image, prompt: Option<&VisualPrompt>) -> Result<VisualPrompt> {
        let p = match prompt {
            _ if self.cfg.ablate_prompts => sample_uniform_points(self.cfg.sampled_points)?,
            None | Some(VisualPrompt::Absent) => sample_uniform_points(self.cfg.sampled_points)?,
            Some(p) => p.clone(),
        };
        p.validate_for(image.height(), image.width())?;
        Ok(p)
    }

    /// Embeds without keeping backward state.
    pub fn embed(&self, p: &ParamStore, input: &EmbedInput) -> Result<UnitEmbedding> {
        self.run(p, input, false).map(|(z, _)| z)
    }

    /// Embeds and returns the tape needed by [`Model::backward`].
    pub fn embed_with_tape(&self, p: &ParamStore, input: &EmbedInput) -> Result<(UnitEmbedding, Tape)> {
        let (z, tape) = self.run(p, input, true)?;
        Ok((z, tape.expect("tape requested")))
    }

    fn run(&self, p: &ParamStore, input: &EmbedInput, keep: bool) -> Result<(UnitEmbedding, Option<Tape>)> {
        let guard = keep.then(|| self.meter.enter());
        let text = input.full_text()?;
        let ids = self.vocab.encode(&text);
        if ids.is_empty() {
            return Err(Error::EmptyInput("no text tokens".into()));
        }
        let text_emb = embed_ids(p, EMBED_TABLE, ids)?;
        let (seg, vision) = match &input.image {
            Some(image) => {
                let prompt = self.resolve_prompt(image, input.prompt.as_ref())?;
                let (map, seg_cache) = self.seg.forward(p, image, &prompt)?;
                let (hs, conn_cache) = self.connector.connect(p, &map)?;
                let (hv, vis_cache) = self.vision.forward(p, image)?;
                (Some((hs.tokens, seg_cache, conn_cache)), Some((hv.tokens, vis_cache)))
            }
            None => (None, None),
        };
        let seq = assemble(
            seg.as_ref().map(|s| &s.0),
            vision.as_ref().map(|v| &v.0),
            Some(&text_emb),
        )?;
        let (hidden, lm_cache) = self.lm.forward(p, &seq.tokens)?;
        let (z, pool) = pool_last(&hidden)?;
        let tape = match guard {
            Some(g) => Some(Tape {
                spans: [seq.span(Segment::Seg), seq.span(Segment::Vision), seq.span(Segment::Text)],
                seg: seg.map(|(_, s, c)| (s, c)),
                vision: vision.map(|(_, v)| v),
                text_ids: text_emb.token_ids,
                lm: lm_cache,
                pool,
                _guard: g,
            }),
            None => None,
        };
        Ok((z, tape))
    }

    /// Accumulates parameter gradients for `dz = dL/dz`.
    pub fn backward(&self, p: &ParamStore, tape: &Tape, dz: &Tensor, g: &mut Grads) -> Result<()> {
        let dh = pool_last_backward(&tape.pool, dz)?;
        let dx = self.lm.backward(p, &tape.lm, &dh, g)?;
        let [seg_span, vis_span, text_span] = &tape.spans;
        if let Some((seg_cache, conn_cache)) = &tape.seg {
            let ds = dx.slice_rows(seg_span.start, seg_span.end)?;
            let dmap = self.connector.backward(p, conn_cache, &ds, g)?;
            if g.wants("seg.decoder.q.w") || g.wants("seg.prompt.proj.w") || g.wants("seg.image.conv.w") {
                self.seg.backward(p, seg_cache, &dmap, g)?;
            }
        }
        if let Some(vis_cache) = &tape.vision {
            if g.wants("vision.patch.w") || g.wants("vision.vl.w") {
                let dv = dx.slice_rows(vis_span.start, vis_span.end)?;
                self.vision.backward(p, vis_cache, &dv, g)?;
            }
        }
        let dt = dx.slice_rows(text_span.start, text_span.end)?;
        embed_backward(p, EMBED_TABLE, &tape.text_ids, &dt, g)
    }
}
