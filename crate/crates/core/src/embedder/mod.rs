//! Sequence assembly, the adapted language model, pooling and checkpoints.

mod lm;
mod model;
mod sequence;

pub use lm::{LanguageModel, LmCache, LmConfig, EMBED_TABLE, POSITIONS};
pub use model::{ActivationMeter, EmbedInput, Model, ModelConfig, Side, Tape, TrainMode};
pub use sequence::{
    assemble, pool_last, pool_last_backward, EmbeddingSequence, PoolCache, Segment, TaskInstruction,
    UnitEmbedding, SCAR_INSTRUCTION,
};
