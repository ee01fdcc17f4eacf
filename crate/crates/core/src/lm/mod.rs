//! Tiny decoder-only transformer over bytes, with low-rank adapters.

pub mod checkpoint;
mod config;
mod forward;
mod loglik;
pub mod tokenizer;
mod weights;

pub use config::{LoraConfig, LoraTarget, ModelConfig};
pub use forward::{forward, forward_graph, Bindings};
pub use loglik::{answer_labels, encode_pair, masked_loss_graph, sequence_loglik, token_loglik, SequenceLoglik};
pub use tokenizer::{detokenize, tokenize, TokenId};
pub use weights::{BaseWeights, Head, LayerWeights, LoraAdapter, LoraBlock};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("target text is empty")]
    EmptyTarget,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("incompatible weights: {0}")]
    Incompatible(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
