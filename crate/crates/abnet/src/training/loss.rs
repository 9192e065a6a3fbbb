use super::MaskedBatch;
use crate::model::{DecoderKind, Forward, MaskMode};
use crate::numerics::{NodeId, Scalar};
use crate::tokenizer::{BOS, EOS};
use crate::{Error, Result};

/// Loss values of one step, already resolved to plain numbers.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: f64,
    pub word: f64,
    pub length: f64,
}

/// Build the fine-tune loss over a batch inside `fwd`'s graph and return
/// the total-loss node.
///
/// With the bidirectional adapter-BERT decoder this is the conditional-MLM
/// objective: mean NLL over all masked target positions in the batch, plus
/// `lambda` times the mean length cross-entropy. The causal and
/// from-scratch autoregressive variants use teacher-forced next-token NLL
/// over every position (targets shifted left, closed by `[EOS]`), with no
/// length term.
pub fn finetune_loss<F: Scalar>(
    fwd: &mut Forward<'_, F>,
    batch: &MaskedBatch,
    lambda: f64,
) -> Result<(NodeId, LossParts)> {
    if batch.items.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let autoregressive = fwd.config().decoder_kind == DecoderKind::TransformerAr
        || fwd.config().decoder_mask == MaskMode::Causal;
    if autoregressive {
        ar_loss(fwd, batch)
    } else {
        cmlm_loss(fwd, batch, lambda)
    }
}

fn cmlm_loss<F: Scalar>(
    fwd: &mut Forward<'_, F>,
    batch: &MaskedBatch,
    lambda: f64,
) -> Result<(NodeId, LossParts)> {
    if lambda < 0.0 {
        return Err(Error::Config(format!(
            "length loss weight must be nonnegative, got {lambda}"
        )));
    }
    let max_len = fwd.config().max_tgt_len;
    let total_masked: usize = batch.items.iter().map(|i| i.masked_count()).sum();
    let mut word_terms: Vec<(NodeId, F)> = Vec::with_capacity(batch.items.len());
    let mut length_terms: Vec<(NodeId, F)> = Vec::with_capacity(batch.items.len());
    let inv_batch = F::from_f64(1.0 / batch.items.len() as f64);

    for item in &batch.items {
        let src = item
            .src
            .as_ref()
            .ok_or_else(|| Error::Contract("fine-tune batch item lacks a source".into()))?;
        let len = item.target_len();
        if len > max_len {
            return Err(Error::Length(format!(
                "target length {len} exceeds max_tgt_len {max_len}"
            )));
        }
        let (enc_out, len_logits) = fwd.encoder_forward(src)?;
        let logits = fwd.decoder_forward(&item.input, enc_out, None)?;
        let targets: Vec<usize> = item.original.iter().map(|&t| t as usize).collect();
        let ignore: Vec<bool> = item.masked.iter().map(|&m| !m).collect();
        let ce = fwd.graph.cross_entropy(logits, &targets, &ignore)?;
        word_terms.push((ce, F::from_f64(item.masked_count() as f64 / total_masked as f64)));

        let len_row = fwd.graph.reshape(len_logits, &[1, max_len])?;
        let len_ce = fwd.graph.cross_entropy(len_row, &[len - 1], &[false])?;
        length_terms.push((len_ce, inv_batch));
    }

    let word = fwd.graph.weighted_sum(&word_terms)?;
    let length = fwd.graph.weighted_sum(&length_terms)?;
    let total = fwd
        .graph
        .weighted_sum(&[(word, F::ONE), (length, F::from_f64(lambda))])?;
    let parts = LossParts {
        total: fwd.graph.value(total).item().to_f64(),
        word: fwd.graph.value(word).item().to_f64(),
        length: fwd.graph.value(length).item().to_f64(),
    };
    Ok((total, parts))
}

fn ar_loss<F: Scalar>(
    fwd: &mut Forward<'_, F>,
    batch: &MaskedBatch,
) -> Result<(NodeId, LossParts)> {
    let positions: usize = batch.items.iter().map(|i| i.target_len() + 1).sum();
    let mut terms: Vec<(NodeId, F)> = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let src = item
            .src
            .as_ref()
            .ok_or_else(|| Error::Contract("fine-tune batch item lacks a source".into()))?;
        let (enc_out, _) = fwd.encoder_forward(src)?;
        // Input shifted right with [BOS]; targets close with [EOS].
        let mut input = Vec::with_capacity(item.original.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&item.original);
        let mut targets: Vec<usize> = item.original.iter().map(|&t| t as usize).collect();
        targets.push(EOS as usize);
        let logits = match fwd.config().decoder_kind {
            DecoderKind::TransformerAr => fwd.transformer_ar_forward(&input, enc_out, None)?,
            DecoderKind::AdapterBert => fwd.decoder_forward(&input, enc_out, None)?,
        };
        let ignore = vec![false; targets.len()];
        let ce = fwd.graph.cross_entropy(logits, &targets, &ignore)?;
        terms.push((ce, F::from_f64(targets.len() as f64 / positions as f64)));
    }
    let word = fwd.graph.weighted_sum(&terms)?;
    let parts = LossParts {
        total: fwd.graph.value(word).item().to_f64(),
        word: fwd.graph.value(word).item().to_f64(),
        length: 0.0,
    };
    Ok((word, parts))
}

/// MLM pre-training loss for a single-stack backbone: mean NLL over every
/// masked position in the batch.
pub fn mlm_loss<F: Scalar>(
    fwd: &mut Forward<'_, F>,
    batch: &MaskedBatch,
    layers: usize,
) -> Result<(NodeId, LossParts)> {
    if batch.items.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let total_masked: usize = batch.items.iter().map(|i| i.masked_count()).sum();
    let mut terms: Vec<(NodeId, F)> = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        let logits = fwd.backbone_forward(&item.input, layers)?;
        let targets: Vec<usize> = item.original.iter().map(|&t| t as usize).collect();
        let ignore: Vec<bool> = item.masked.iter().map(|&m| !m).collect();
        let ce = fwd.graph.cross_entropy(logits, &targets, &ignore)?;
        terms.push((ce, F::from_f64(item.masked_count() as f64 / total_masked as f64)));
    }
    let loss = fwd.graph.weighted_sum(&terms)?;
    let v = fwd.graph.value(loss).item().to_f64();
    Ok((
        loss,
        LossParts {
            total: v,
            word: v,
            length: 0.0,
        },
    ))
}
