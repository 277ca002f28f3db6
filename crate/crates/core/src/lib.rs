//! Generative next-item recommendation over semantic IDs.
//!
//! Items are discretized into fixed-length code tuples by a residual
//! quantizer ([`tokenizer`]), histories become flat token sequences, and an
//! encoder-decoder backbone ([`recommender`]) generates the next item's codes.
//! The [`dual_branch`] module disentangles semantic and collaborative signals
//! at the embedding layer using item-level position embeddings and item-local
//! attention. [`decoding`] runs prefix-tree constrained beam search and
//! [`evaluation`] scores rankings with Recall@K / NDCG@K.

pub mod data;
pub mod decoding;
pub mod diagnostics;
pub mod dual_branch;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod recommender;
pub mod tokenizer;

pub use error::{Error, Result};
