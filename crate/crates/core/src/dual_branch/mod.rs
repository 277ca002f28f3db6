//! The disentangling module applied at the embedding layer.
//!
//! A semantic branch passes token embeddings through unchanged. A
//! collaborative branch adds item-level position embeddings and runs one
//! transformer block whose attention is confined to tokens of the same item.
//! A per-token gate mixes the two.

mod layout;
mod module;

pub use layout::{ipe_for_input, ipe_for_target, ipe_rows, item_local_mask, item_membership, ItemLocalMask};
pub use module::{
    batch_mask, combine, fuse, fusion_weights, localized_attention, non_pad, Aggregation, BranchOptions, BranchOutput,
    BranchTransformer, DualBranch, DualBranchConfig, DualBranchModule, Fusion, GateOverride, Side,
};

use candle_core::Tensor;

/// Semantic branch: the identity.
pub fn semantic_branch(e: &Tensor) -> Tensor {
    e.clone()
}
