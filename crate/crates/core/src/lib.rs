//! Echo embeddings for autoregressive language models.
//!
//! A causal transformer cannot let early tokens see later ones, so mean-pooling
//! a sentence presented once under-represents its ending. Presenting the
//! sentence twice and pooling only the second copy lets every pooled position
//! attend to the whole sentence. This crate builds those embeddings (plus the
//! classical and one-word summarization baselines) against any backend that
//! yields final-layer hidden states, and ships the tooling to check the
//! mechanism exactly on a small seeded transformer:
//!
//! * [`templating`] renders prompts with byte-exact segment bookkeeping.
//! * [`backend`] holds the toy transformer and the external provider client.
//! * [`pooling`] and [`strategy`] turn hidden states into embeddings.
//! * [`bench`] runs the synthetic triplet experiments.
//! * [`trainer`] fine-tunes the toy model with a contrastive objective.
//! * [`analysis`] measures rank errors on scored sentence pairs.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below pin the common
//! instantiations.

pub mod analysis;
pub mod backend;
pub mod bench;
mod error;
pub mod pooling;
mod scalar;
pub mod strategy;
pub mod templating;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use backend::toy::{ToyModel, ToyModelConfig, ToyTokenizer};
pub use backend::{AttentionMode, Backend, HiddenStates, Tokenization};
pub use pooling::PooledEmbedding;
pub use strategy::Pooling;
pub use templating::{RenderedInput, Role, SegmentLabel, SpanIndexSet, Strategy, Template};

pub type ToyModelF32 = ToyModel<f32>;
pub type ToyModelF64 = ToyModel<f64>;
pub type HiddenStatesF32 = HiddenStates<f32>;
pub type HiddenStatesF64 = HiddenStates<f64>;
