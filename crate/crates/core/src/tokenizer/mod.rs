//! Residual-quantization tokenizer: item embeddings → fixed-length semantic
//! IDs, collision-free assignment, the prefix tree used for constrained
//! decoding, and the global token vocabulary.

mod ids;
mod kmeans;
mod params;
mod rqvae;
mod vocab;

pub use ids::{assign_ids, build_prefix_tree, CollisionReport, IdMap, PrefixTree, Reassignment};
pub use kmeans::kmeans;
pub use params::{
    interpolated_dims, nearest_code, quantize, tokenization_loss, CodebookSet, Dense, Mlp, Quantized, RqVaeParams,
    Standardizer,
};
pub use rqvae::{train_tokenizer, LossTerms, RqVaeNet, TokenizerConfig, TokenizerReport};
pub use vocab::{TokenVocabulary, BOS, EOS, NUM_SPECIALS, PAD};

/// Semantic ID: one code per level.
pub type SemanticId = Vec<u32>;
