//! Desk-scale pipeline for bridging a frozen bilingual masked language model
//! into a transformer NMT system.
//!
//! The pieces, bottom to top:
//!
//! - [`numcore`]: dense 2-D tensor graph with reverse-mode differentiation,
//!   Adam, and the two learning-rate schedules used by the trainers.
//! - [`subword`]: merge-based subword vocabulary training and greedy
//!   longest-match encoding with `##` continuation pieces.
//! - [`data`]: parallel corpus loading, dual-directional mixing, token-count
//!   batching, and dynamic masking.
//! - [`transformer`]: multi-head attention, encoder stacks that expose every
//!   layer's output, and causal decoder stacks.
//! - [`mlm`]: masked-LM pretraining of the small bilingual encoder.
//! - [`bridge`]: serves frozen contextualized embeddings to the NMT encoder,
//!   stochastically per batch during training and layer-averaged at inference.
//! - [`nmt`]: encoder-decoder training (one-way, dual-directional, fine-tune)
//!   and beam-search decoding.
//! - [`eval`]: corpus-level tokenized BLEU.
//! - [`config`] / [`checkpoint`]: flat key=value run configuration and the
//!   binary checkpoint format shared by all trainers.
//! - [`synth`]: deterministic toy bilingual corpora for tests and demos.

pub mod bridge;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod mlm;
pub mod nmt;
pub mod numcore;
pub mod subword;
pub mod synth;
pub mod transformer;

pub use error::{Error, Result};
