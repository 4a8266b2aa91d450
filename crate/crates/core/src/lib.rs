//! Dual-channel audio–image contrastive retrieval.
//!
//! A pipeline channel (transcribe, then encode text) and an end-to-end
//! acoustic channel share one set of trainable prompts and are fused by
//! addition before contrastive matching against image embeddings. Everything
//! runs on the small reverse-mode engine in [`numerics`].

pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod params;
pub mod training;

pub use error::{Error, Result};
