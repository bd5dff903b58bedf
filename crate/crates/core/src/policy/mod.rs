//! The trainable policy: byte tokenizer, transformer, sampling, checkpoints.

mod checkpoint;
mod model;
mod sampling;
mod tokenizer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use model::{
    forward_cached, init_params, next_token_logprobs, packed_logprobs, sequence_logprobs,
    KvCache, ParamVars, PolicyConfig, PolicyParams, FFN_MULT, LN_EPS,
};
pub use sampling::{
    generate, greedy_completion, sample_completions, Completion, Decoding, Generated,
};
pub use tokenizer::{TokenId, Tokenizer, BOS, EOS, VOCAB_SIZE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("context overflow: need {needed} positions, context is {context}")]
    ContextOverflow { needed: usize, context: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("token id {0} outside the vocabulary")]
    Token(TokenId),
    #[error("group size {0} < 2")]
    GroupTooSmall(usize),
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}
