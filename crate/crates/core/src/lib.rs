//! Multimodal meme affect classifier: a small reverse-mode tensor engine and
//! the segment-level multi-hop attention network built on it.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod text_encoder;
pub mod train;
pub mod visual_filter;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelParams};
pub use tape::{Tape, Var};
pub use tensor::{ParamStore, Tensor};
