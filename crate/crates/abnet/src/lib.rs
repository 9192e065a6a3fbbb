//! Adapter-BERT networks for sequence-to-sequence generation.
//!
//! Two small BERT stacks are pre-trained with masked language modeling,
//! frozen, and joined into an encoder-decoder assembly by lightweight
//! trainable adapter layers: feed-forward bottleneck adapters inside the
//! encoder and cross-attention adapters inside the decoder. Decoding is
//! either Mask-Predict parallel refinement or autoregressive beam search.
//!
//! The crate is organized along the pipeline:
//!
//! - [`numerics`]: dense tensors with reverse-mode differentiation
//! - [`tokenizer`]: wordpiece vocabularies and encoding
//! - [`model`]: the computation graph of the adapter assembly
//! - [`training`]: MLM pre-training and adapter fine-tuning
//! - [`decoding`]: Mask-Predict and beam search
//! - [`evaluation`]: corpus BLEU, exact match, latency, parameter audits
//! - [`harness`]: synthetic datasets, checkpoints, config files, pipelines

pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
