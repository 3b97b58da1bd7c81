//! Autoregressive policy over token sequences.
//!
//! A small causal attention network with three grammar-specific pieces: a
//! learned scalar attention offset per (tree relation, head), a sinusoidal
//! encoding of depth-in-tree added on top of the usual position encoding,
//! and hard masking of grammar-invalid tokens before the softmax. Forward,
//! backward, and incremental decoding are hand-rolled over flat `f64`
//! parameter vectors, which keeps gradients checkable against finite
//! differences.

mod net;
mod run;
mod train;

pub use net::{Decoder, ForwardTrace, ParamLayout, PolicyParams};
pub use run::{
    net_input_for, replay_masks,
    masked_log_softmax, sample_structure, sequence_logprob, uniform_rollout, SampledEpisode,
};
pub use train::{accumulate_sequence_grad, imitation_train, ImitationConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("model_dim {model_dim} not divisible by num_heads {num_heads}")]
    BadHeadSplit { model_dim: usize, num_heads: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    EpisodeTooLong { len: usize, max: usize },
    #[error("vocabulary mask is empty (grammar no-dead-end invariant broken)")]
    EmptyMask,
    #[error("checkpoint config mismatch: expected {expected:?}, found {found:?}")]
    ConfigMismatch {
        expected: Box<PolicyConfig>,
        found: Box<PolicyConfig>,
    },
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Grammar(#[from] crate::grammar::GrammarError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub rng_seed: u64,
}

impl PolicyConfig {
    /// Default scale: 2 layers, 4 heads, width 64.
    pub fn new(vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            max_seq_len: 512,
            vocab_size,
            rng_seed: 0,
        }
    }

    /// Tiny configuration for oracle tests and finite differences.
    pub fn micro(vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            max_seq_len: 128,
            vocab_size,
            rng_seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.model_dim % self.num_heads != 0 {
            return Err(PolicyError::BadHeadSplit {
                model_dim: self.model_dim,
                num_heads: self.num_heads,
            });
        }
        Ok(())
    }
}
