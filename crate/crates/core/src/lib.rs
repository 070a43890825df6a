//! Transformer encoder-decoder with cross-layer attention sharing.
//!
//! Layers inside a sharing block reuse the attention weights (self-attention)
//! or the attention output (encoder-decoder attention) computed at the block's
//! bottom layer. The crate covers the dense kernels, cached decoding,
//! Jensen-Shannon layer similarity, policy search and a small trainer.

pub mod attention;
pub mod data;
pub mod divergence;
pub mod error;
pub mod model;
pub mod policy;
pub mod tensor;

pub use error::{Error, Result};
