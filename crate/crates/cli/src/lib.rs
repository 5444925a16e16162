//! Command line tools and the HTTP service around the embedder and the
//! benchmark pipeline.

pub mod data;
pub mod run;
pub mod server;
