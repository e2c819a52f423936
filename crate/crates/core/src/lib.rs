//! Guided convolutional joint language models.
//!
//! A source sentence is summarised by a convolutional encoder whose first
//! layers are steered by a guide signal (affiliated-word tags, dependency
//! head tags, or an attention vector computed from the target history).
//! The resulting representation and the previous `k` target words feed a
//! feed-forward predictor over the target vocabulary. Models are trained
//! with minibatch SGD and used to rescore n-best lists.

pub mod artifact;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod jointlm;
pub mod model;
pub mod nbest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
