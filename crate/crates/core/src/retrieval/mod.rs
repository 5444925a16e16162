//! Candidate ranking, precision@1 scoring, benchmark records and the
//! persistent embedding index.

mod eval;
mod index;
mod sample;

pub use eval::{
    format_bbox, hash_embedding, precision_at_1, rank, retrieve_candidates, textualize_bbox, ConstantScorer,
    DatasetScore, EvalItem, ModelScorer, OracleScorer, PrecisionReport, RandomScorer, RankedCandidate, Scorer,
    CANDIDATES_PER_SAMPLE,
};
pub use index::{EmbeddingIndex, IndexEntry, IndexHit};
pub use sample::{
    Candidate, ImageSize, Negative, NegativeType, ScarSample, NEGATIVES_PER_TYPE, NEGATIVE_COUNT, SAMPLE_SCHEMA,
};
