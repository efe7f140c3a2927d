//! A small GPT-2 trainer in the style of llm.c. Matrix products go through
//! the offload runtime; the rest runs on the host.

mod config;
pub mod data;
pub mod flops;
mod model;
pub mod ops;
mod params;
#[cfg(test)]
mod tests;

use thiserror::Error;

pub use config::{ModelConfig, Optimizer, RunConfig, TrainConfig};
pub use flops::{count_flops, extract_gemm_sizes, gemm_calls, FlopClass, FlopEntry, FlopLedger};
pub use model::{Activations, GemmStats, Gpt2, LayerActs};
pub use params::{LayerParams, ParamStore};

use crate::offload::OffloadError;

#[derive(Debug, Error)]
pub enum Gpt2Error {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("token {token} at position {position} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { position: usize, token: usize, vocab: usize },
    #[error("sequence has {found} tokens, the model expects {expected}")]
    SequenceLength { expected: usize, found: usize },
    #[error(transparent)]
    Offload(#[from] OffloadError),
}
