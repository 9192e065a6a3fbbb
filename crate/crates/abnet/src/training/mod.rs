//! MLM pre-training and conditional-MLM fine-tuning.
//!
//! Pre-training drives a single BERT stack with the masked-language-model
//! objective (a fixed masking fraction). Fine-tuning drives the assembled
//! encoder-decoder with the conditional variant: the number of masked
//! target tokens is drawn uniformly from 1..=|y|, the source is prefixed
//! with `[LENGTH]`, and the length-classification loss is added to the
//! word loss. The optimizer is Adam, applied to the TRAINABLE partition
//! only; FROZEN tensors stay bit-identical for any number of steps.

mod batch;
mod loss;
mod optimizer;
mod trainer;

pub use batch::{ar_batch, sample_cmlm_batch, sample_mlm_batch, MaskedBatch, MaskedItem};
pub use loss::LossParts;
pub use optimizer::Adam;
pub use trainer::{
    mlm_eval, pretrain_backbone, run_epochs, StepRecord, TrainConfig, TrainData, TrainMode,
    Trainer, METRICS_HEADER,
};
