//! Construction toolchain for the segmentation-aware caption retrieval
//! benchmark: ingestion, object sampling, candidate generation, filtering
//! and emission.

pub mod client;
pub mod elements;
mod error;
pub mod filter;
pub mod ingest;
pub mod lexicon;
pub mod pipeline;
pub mod prompt;

pub use client::{generate_candidates, Candidates, GeneratorClient, HttpClient, HttpVerifier, MockClient, RetryPolicy};
pub use elements::{CaptionElements, Extraction, NegativeElements, RuleExtractor, Swap, Verifier};
pub use error::{Result, ScarError};
pub use filter::{filter_sample, replay_rule, synonym_filter, verify_structure, FilterReport, Rule, Status, Violation};
pub use ingest::{ingest, CocoAnnotation, CocoRecord, Format, IngestOptions, RecordStream, Skip};
pub use lexicon::Lexicon;
pub use pipeline::{emit, filter_all, generate, stats, GenerateOptions, Split, Stats};
pub use prompt::{build_prompt, sample_objects, template_hash, MAX_OBJECTS};
