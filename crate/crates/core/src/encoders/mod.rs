//! Desk-scale stand-ins for the three input streams: a patch vision
//! encoder, a text embedding table and a prompt-conditioned segmentation
//! model.

mod image;
mod prompt;
mod seg;
mod text;
mod vision;

pub use image::{Bbox, Image, MIN_SIDE};
pub use prompt::{sample_uniform_points, VisualPrompt};
pub use seg::{DecodeCache, FeatureMap, ImageCache, PromptCache, SegCache, SegConfig, SegModel};
pub use text::{embed_text, tokenize, TextEmbeddings, Vocab, NUM, UNK};
pub(crate) use text::{embed_backward, embed_ids};
pub use vision::{GlobalVisionEmbeddings, VisionCache, VisionConfig, VisionEncoder};
