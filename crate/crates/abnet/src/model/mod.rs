//! The adapter-BERT computation graph.
//!
//! Two frozen BERT stacks form the encoder (XBERT) and decoder (YBERT).
//! Encoder layers are followed by feed-forward bottleneck adapters,
//! decoder layers by cross-attention adapters that read the encoder
//! output. A linear head over the `[LENGTH]` position predicts the target
//! length, and output logits are tied to the target token embedding. An
//! alternative decoder — a standard autoregressive transformer trained
//! from scratch — supports beam-search decoding with the same encoder.

mod config;
mod forward;
mod init;
mod store;

pub use config::{DecoderKind, MaskMode, ModelConfig, Side};
pub use forward::{Forward, StackEvent, LN_EPS};
pub use init::{adapters_only_rule, assemble, init_backbone, seeded_rng};
pub use store::{ParameterStore, Partition};
