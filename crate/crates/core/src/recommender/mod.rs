//! Encoder–decoder generative recommender over semantic-ID tokens and its
//! embedding-layer variants.

mod backbone;
mod config;
mod model;
mod train;

pub use backbone::{DecoderLayer, EncoderLayer, ENCODER_SELF_ATTENTION};
pub use config::{Activation, BackboneConfig, Precision, RecommenderConfig, TrainConfig, Variant};
pub use model::{build_variant, pad_left, rec_loss, Recommender};
pub use train::{evaluate_loss, make_examples, train_recommender, Batch, Example, TrainReport};
