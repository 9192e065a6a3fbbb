//! Mask-Predict parallel decoding and autoregressive beam search.
//!
//! Mask-Predict starts from an all-`[MASK]` canvas at each of the B most
//! likely target lengths, predicts every position at once, then
//! iteratively re-masks the lowest-confidence positions on a linear decay
//! schedule and re-predicts only those, leaving the other positions'
//! tokens and stored probabilities untouched. The number of decoder
//! passes is bounded by B·T regardless of output length; autoregressive
//! decoding instead spends one pass per generated token.

use crate::model::{DecoderKind, Forward, MaskMode, ModelConfig, ParameterStore};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::{BOS, EOS, LENGTH, MASK, NUM_SPECIALS};
use crate::{Error, Result};

/// Decoding hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct DecodeConfig {
    /// Upper bound T on Mask-Predict prediction passes per candidate.
    pub max_iterations: usize,
    /// Length beam B: number of candidate lengths decoded.
    pub length_beam: usize,
    /// Beam width for autoregressive decoding.
    pub beam_width: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_iterations: 10,
            length_beam: 4,
            beam_width: 5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.length_beam == 0 || self.beam_width == 0 {
            return Err(Error::Config(
                "decode parameters must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-candidate canvas state during Mask-Predict refinement.
#[derive(Clone, Debug)]
pub struct DecodeState {
    /// Candidate target length L.
    pub length: usize,
    /// Current tokens; masked positions hold `[MASK]`.
    pub canvas: Vec<u32>,
    /// Stored probability of each placed token, in (0, 1] once predicted.
    pub probs: Vec<f64>,
    /// Positions awaiting re-prediction.
    pub masked: Vec<bool>,
    /// Completed prediction passes (the initial full pass counts as 1).
    pub t: usize,
    /// Canvas after the previous pass, once two passes exist.
    pub prev_canvas: Option<Vec<u32>>,
}

/// Result of a decode call.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    /// Length-normalized log-probability of the returned hypothesis.
    pub score: f64,
    /// Prediction passes used by the winning candidate (Mask-Predict) or
    /// generation steps taken (autoregressive).
    pub iterations_used: usize,
    /// Total decoder forward passes across all candidates.
    pub decoder_calls: usize,
    /// Autoregressive decoding ran out of length budget before `[EOS]`.
    pub truncated: bool,
}

/// One refinement record of a traced Mask-Predict run.
#[derive(Clone, Debug)]
pub struct IterationTrace {
    /// Positions re-masked before this pass (empty for the initial pass).
    pub remasked: Vec<usize>,
    pub canvas: Vec<u32>,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct CandidateTrace {
    pub length: usize,
    pub passes: Vec<IterationTrace>,
}

/// Linear decay schedule: `⌊L·(T−t)/T⌋` tokens are re-masked before
/// refinement pass t (1 ≤ t ≤ T−1).
pub fn remask_count(length: usize, max_iterations: usize, t: usize) -> usize {
    debug_assert!(t >= 1 && t <= max_iterations.saturating_sub(1));
    length * (max_iterations - t) / max_iterations
}

/// Stop refining when the pass budget is exhausted, the canvas stopped
/// changing, or the schedule would re-mask nothing.
pub fn stop_condition(state: &DecodeState, max_iterations: usize) -> bool {
    debug_assert!(state.t >= 1);
    if state.t >= max_iterations {
        return true;
    }
    if state.prev_canvas.as_deref() == Some(state.canvas.as_slice()) {
        return true;
    }
    remask_count(state.length, max_iterations, state.t) == 0
}

/// The B highest-scoring length classes, descending by logit, ties broken
/// by the smaller length. Class i corresponds to length i+1.
pub fn predict_lengths<F: Scalar>(length_logits: &Tensor<F>, beam: usize) -> Result<Vec<usize>> {
    let n = length_logits.numel();
    if beam > n {
        return Err(Error::Config(format!(
            "length beam {beam} exceeds the {n} length classes"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (length_logits.data()[a], length_logits.data()[b]);
        lb.partial_cmp(&la)
            .expect("finite length logits")
            .then(a.cmp(&b))
    });
    Ok(order[..beam].iter().map(|&i| i + 1).collect())
}

fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
    let denom: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
    let log_denom = denom.ln();
    row.iter().map(|v| v.to_f64() - max - log_denom).collect()
}

/// Run the encoder once, returning the hidden state and length logits as
/// plain tensors. `src_ids` is the raw source; the `[LENGTH]` prefix is
/// added here.
fn encode_source<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    src_ids: &[u32],
) -> Result<(Tensor<F>, Tensor<F>)> {
    if src_ids.is_empty() {
        return Err(Error::Data("cannot decode an empty source".into()));
    }
    let mut full = Vec::with_capacity(src_ids.len() + 1);
    full.push(LENGTH);
    full.extend_from_slice(src_ids);
    let mut fwd = Forward::new(store, config);
    let (h, logits) = fwd.encoder_forward(&full)?;
    Ok((fwd.graph.value(h).clone(), fwd.graph.value(logits).clone()))
}

/// Predict the currently masked positions of the canvas, writing argmax
/// tokens and their probabilities. Special tokens never win the argmax.
fn predict_masked<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    enc_out: &Tensor<F>,
    state: &mut DecodeState,
) -> Result<()> {
    let mut fwd = Forward::new(store, config);
    let enc = fwd.graph.constant(enc_out.clone());
    let logits = fwd.decoder_forward(&state.canvas, enc, None)?;
    let lv = fwd.graph.value(logits);
    for pos in 0..state.length {
        if !state.masked[pos] {
            continue;
        }
        let lp = log_softmax_row(lv.row(pos));
        let (best, best_lp) = lp
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS)
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite log-probs"))
            .expect("vocabulary has ordinary tokens");
        state.canvas[pos] = best as u32;
        state.probs[pos] = best_lp.exp();
        state.masked[pos] = false;
    }
    state.t += 1;
    Ok(())
}

fn decode_candidate<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    enc_out: &Tensor<F>,
    length: usize,
    max_iterations: usize,
    mut trace: Option<&mut CandidateTrace>,
) -> Result<(DecodeState, usize)> {
    let mut state = DecodeState {
        length,
        canvas: vec![MASK; length],
        probs: vec![0.0; length],
        masked: vec![true; length],
        t: 0,
        prev_canvas: None,
    };
    let mut calls = 0usize;

    // Initial pass: every position predicted.
    predict_masked(store, config, enc_out, &mut state)?;
    calls += 1;
    if let Some(tr) = trace.as_deref_mut() {
        tr.passes.push(IterationTrace {
            remasked: vec![],
            canvas: state.canvas.clone(),
            probs: state.probs.clone(),
        });
    }

    while !stop_condition(&state, max_iterations) {
        let n = remask_count(length, max_iterations, state.t);
        // Re-mask the n lowest-probability positions, ties at the lower
        // index.
        let mut order: Vec<usize> = (0..length).collect();
        order.sort_by(|&a, &b| {
            state.probs[a]
                .partial_cmp(&state.probs[b])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        let remasked: Vec<usize> = order[..n].to_vec();
        state.prev_canvas = Some(state.canvas.clone());
        for &p in &remasked {
            state.canvas[p] = MASK;
            state.masked[p] = true;
        }
        predict_masked(store, config, enc_out, &mut state)?;
        calls += 1;
        if let Some(tr) = trace.as_deref_mut() {
            tr.passes.push(IterationTrace {
                remasked,
                canvas: state.canvas.clone(),
                probs: state.probs.clone(),
            });
        }
    }
    Ok((state, calls))
}

fn candidate_score(state: &DecodeState) -> f64 {
    state.probs.iter().map(|p| p.ln()).sum::<f64>() / state.length as f64
}

/// Mask-Predict decoding over the top-B length candidates; the best
/// candidate by length-normalized log-probability wins, earlier candidate
/// index breaking ties.
pub fn mask_predict_decode<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    decode: &DecodeConfig,
    src_ids: &[u32],
) -> Result<DecodeOutput> {
    Ok(mask_predict_decode_traced(store, config, decode, src_ids, false)?.0)
}

/// As [`mask_predict_decode`], optionally recording every pass of every
/// candidate for persistence checks.
pub fn mask_predict_decode_traced<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    decode: &DecodeConfig,
    src_ids: &[u32],
    with_trace: bool,
) -> Result<(DecodeOutput, Vec<CandidateTrace>)> {
    decode.validate()?;
    if !store.contains("length_head.w") {
        return Err(Error::Contract(
            "mask-predict decoding requires an assembled model with a length head".into(),
        ));
    }
    let (enc_out, length_logits) = encode_source(store, config, src_ids)?;
    let lengths = predict_lengths(&length_logits, decode.length_beam)?;

    let mut traces: Vec<CandidateTrace> = Vec::new();
    let mut best: Option<(f64, DecodeState, usize)> = None;
    let mut total_calls = 0usize;
    for length in lengths {
        let mut trace = with_trace.then(|| CandidateTrace {
            length,
            passes: Vec::new(),
        });
        let (state, calls) = decode_candidate(
            store,
            config,
            &enc_out,
            length,
            decode.max_iterations,
            trace.as_mut(),
        )?;
        total_calls += calls;
        if let Some(tr) = trace {
            traces.push(tr);
        }
        let score = candidate_score(&state);
        let better = match &best {
            Some((best_score, _, _)) => score > *best_score,
            None => true,
        };
        if better {
            best = Some((score, state, calls));
        }
    }
    let (score, state, winner_calls) = best.expect("length beam is non-empty");
    Ok((
        DecodeOutput {
            tokens: state.canvas,
            score,
            iterations_used: winner_calls,
            decoder_calls: total_calls,
            truncated: false,
        },
        traces,
    ))
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    /// Length-normalized score; the `[EOS]` of a finished hypothesis
    /// counts toward both the sum and the length.
    fn score(&self) -> f64 {
        let len = self.tokens.len() + usize::from(self.finished);
        self.log_prob / len.max(1) as f64
    }
}

/// Standard beam search from `[BOS]` to `[EOS]` with length-normalized
/// log-probability scoring. Works with the from-scratch autoregressive
/// decoder or the causal-mode adapter-BERT decoder. When no hypothesis
/// reaches `[EOS]` within the length budget the best unfinished one is
/// returned with `truncated` set.
pub fn beam_search_decode<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    width: usize,
    src_ids: &[u32],
) -> Result<DecodeOutput> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if config.decoder_kind == DecoderKind::AdapterBert && config.decoder_mask != MaskMode::Causal {
        return Err(Error::Contract(
            "beam search requires a causal decoder (transformer-ar kind or causal mask mode)"
                .into(),
        ));
    }
    let (enc_out, _) = encode_source(store, config, src_ids)?;
    let vocab = config.tgt_vocab;

    let step = |prefix: &[u32]| -> Result<Vec<f64>> {
        let mut fwd = Forward::new(store, config);
        let enc = fwd.graph.constant(enc_out.clone());
        let mut input = Vec::with_capacity(prefix.len() + 1);
        input.push(BOS);
        input.extend_from_slice(prefix);
        let logits = match config.decoder_kind {
            DecoderKind::TransformerAr => fwd.transformer_ar_forward(&input, enc, None)?,
            DecoderKind::AdapterBert => fwd.decoder_forward(&input, enc, None)?,
        };
        let lv = fwd.graph.value(logits);
        Ok(log_softmax_row(lv.row(input.len() - 1)))
    };

    let mut live = vec![Hypothesis {
        tokens: vec![],
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut calls = 0usize;

    for _ in 0..config.max_tgt_len {
        // Expansions over the ordinary vocabulary plus [EOS]; the other
        // specials are never generation candidates. EOS-terminated
        // expansions compete in the same top-width pruning (so width 1 is
        // exactly greedy), and survivors retire to the finished pool.
        let mut expanded: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let lp = step(&hyp.tokens)?;
            calls += 1;
            expanded.push(Hypothesis {
                tokens: hyp.tokens.clone(),
                log_prob: hyp.log_prob + lp[EOS as usize],
                finished: true,
            });
            for v in NUM_SPECIALS..vocab {
                let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
                tokens.extend_from_slice(&hyp.tokens);
                tokens.push(v as u32);
                expanded.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp[v],
                    finished: false,
                });
            }
        }
        expanded.sort_by(|a, b| b.score().partial_cmp(&a.score()).expect("finite scores"));
        expanded.truncate(width);
        live = Vec::new();
        for hyp in expanded {
            if hyp.finished {
                finished.push(hyp);
            } else {
                live.push(hyp);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let best_finished = finished
        .into_iter()
        .max_by(|a, b| a.score().partial_cmp(&b.score()).expect("finite scores"));
    let (hyp, truncated) = match best_finished {
        Some(h) => (h, false),
        None => (
            live.into_iter()
                .next()
                .ok_or_else(|| Error::State("beam search produced no hypotheses".into()))?,
            true,
        ),
    };
    let steps = hyp.tokens.len() + usize::from(hyp.finished);
    Ok(DecodeOutput {
        score: hyp.score(),
        tokens: hyp.tokens,
        iterations_used: steps,
        decoder_calls: calls,
        truncated,
    })
}

/// Greedy decoding: one forward pass per generated token, argmax over the
/// ordinary vocabulary plus `[EOS]`.
pub fn greedy_decode<F: Scalar>(
    store: &ParameterStore<F>,
    config: &ModelConfig,
    src_ids: &[u32],
) -> Result<DecodeOutput> {
    let (enc_out, _) = encode_source(store, config, src_ids)?;
    let mut tokens: Vec<u32> = Vec::new();
    let mut log_prob = 0.0;
    let mut calls = 0usize;
    let mut finished = false;
    for _ in 0..config.max_tgt_len {
        let mut fwd = Forward::new(store, config);
        let enc = fwd.graph.constant(enc_out.clone());
        let mut input = Vec::with_capacity(tokens.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&tokens);
        let logits = match config.decoder_kind {
            DecoderKind::TransformerAr => fwd.transformer_ar_forward(&input, enc, None)?,
            DecoderKind::AdapterBert => fwd.decoder_forward(&input, enc, None)?,
        };
        calls += 1;
        let lp = log_softmax_row(fwd.graph.value(logits).row(input.len() - 1));
        let (best, best_lp) = lp
            .iter()
            .enumerate()
            .filter(|(v, _)| *v >= NUM_SPECIALS || *v == EOS as usize)
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite log-probs"))
            .expect("non-empty vocabulary");
        log_prob += best_lp;
        if best == EOS as usize {
            finished = true;
            break;
        }
        tokens.push(best as u32);
    }
    let steps = tokens.len() + usize::from(finished);
    Ok(DecodeOutput {
        score: log_prob / steps.max(1) as f64,
        tokens,
        iterations_used: steps,
        decoder_calls: calls,
        truncated: !finished,
    })
}
