//! Small neural-network toolkit on top of candle: parameter store,
//! checkpoint container and the layers shared by the tokenizer, the
//! backbone and the dual-branch module.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod position;

pub use checkpoint::{Checkpoint, StoredTensor, TensorData};
pub use layers::{Ctx, FeedForward, Linear, MultiHeadAttention, RmsNorm};
pub use params::ParamStore;
pub use position::RelativePositionBias;
