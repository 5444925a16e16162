//! Prompt-conditioned multimodal embedding at desk scale.
//!
//! The crate is organised bottom-up: [`numkernel`] provides tensors with
//! hand-written backward passes; [`encoders`] and [`connector`] turn images
//! and visual prompts into token blocks; [`embedder`] runs the LoRA-adapted
//! causal language model and pools unit embeddings; [`trainer`] optimises
//! them with in-batch InfoNCE and gradient caching; [`retrieval`] ranks
//! candidate captions and scores precision@1.

mod error;
mod layers;

pub mod checkpoint;
pub mod connector;
pub mod embedder;
pub mod encoders;
pub mod numkernel;
pub mod retrieval;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
