//! Deterministic toy causal transformer.

mod checkpoint;
mod model;
mod ops;
mod tokenizer;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use model::{ForwardCache, ParamKind, ParamLayout, ParamTensor, ToyModel, ToyModelConfig, INIT_STD, MLP_RATIO};
pub use tokenizer::{ToyTokenizer, EOS_ID, EOS_MARKER};
