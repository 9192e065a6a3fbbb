//! Corpus BLEU, exact match, latency measurement and parameter audits.
//!
//! BLEU follows the multi-bleu arithmetic: modified n-gram precisions are
//! clipped per sentence, counts are summed over the corpus before
//! dividing, the geometric mean of p₁..p₄ is taken with no smoothing (any
//! zero precision gives BLEU 0), and the brevity penalty is
//! `exp(min(0, 1 − ref_len/hyp_len))`.

use std::collections::HashMap;
use std::hash::Hash;
use std::time::Instant;

use crate::model::{ParameterStore, Partition};
use crate::numerics::Scalar;
use crate::{Error, Result};

const MAX_NGRAM: usize = 4;

/// Corpus-level metrics plus the bookkeeping columns of a run report.
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    /// Corpus BLEU in [0, 100].
    pub bleu: f64,
    /// Modified n-gram precisions p₁..p₄.
    pub precisions: [f64; MAX_NGRAM],
    /// Brevity penalty in (0, 1].
    pub brevity_penalty: f64,
    /// Fraction of hypotheses identical to their reference.
    pub exact_match: f64,
    /// Mean wall-clock per sentence, batch size 1.
    pub latency_ms: f64,
    /// Mean Mask-Predict passes (parallel) or generated tokens (AR).
    pub mean_iterations: f64,
    /// Mean decoder forward passes per sentence.
    pub mean_decoder_calls: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str = "bleu\tp1\tp2\tp3\tp4\tbrevity-penalty\texact-match\t\
                                          latency-ms\tmean-iterations\tmean-decoder-calls\t\
                                          trainable-params\ttotal-params";

    /// Single-line tab-separated record.
    pub fn tsv_line(&self) -> String {
        format!(
            "{:.2}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{:.2}\t{:.2}\t{}\t{}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.exact_match,
            self.latency_ms,
            self.mean_iterations,
            self.mean_decoder_calls,
            self.trainable_params,
            self.total_params
        )
    }

    /// Human-readable block.
    pub fn render(&self) -> String {
        format!(
            "BLEU               {:.2}\n\
             precisions         {:.1}/{:.1}/{:.1}/{:.1}\n\
             brevity penalty    {:.4}\n\
             exact match        {:.4}\n\
             latency            {:.3} ms/sentence\n\
             mean iterations    {:.2}\n\
             mean decoder calls {:.2}\n\
             trainable params   {}\n\
             total params       {}\n",
            self.bleu,
            self.precisions[0] * 100.0,
            self.precisions[1] * 100.0,
            self.precisions[2] * 100.0,
            self.precisions[3] * 100.0,
            self.brevity_penalty,
            self.exact_match,
            self.latency_ms,
            self.mean_iterations,
            self.mean_decoder_calls,
            self.trainable_params,
            self.total_params
        )
    }
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped modified n-gram precisions, n = 1..4, and the
/// multi-bleu brevity penalty. Returns the report with the BLEU fields
/// and `exact_match` filled in.
pub fn corpus_bleu<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<EvalReport> {
    if hypotheses.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    let mut exact = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        if hyp == reference {
            exact += 1;
        }
        for n in 1..=MAX_NGRAM {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
                total[n - 1] += count;
            }
        }
    }
    let mut report = EvalReport {
        exact_match: exact as f64 / hypotheses.len() as f64,
        brevity_penalty: if hyp_len == 0 {
            1.0
        } else {
            (1f64.min(1.0 - ref_len as f64 / hyp_len as f64)).exp().min(1.0)
        },
        ..EvalReport::default()
    };
    let mut log_sum = 0.0;
    let mut any_zero = false;
    let mut orders = 0usize;
    for n in 0..MAX_NGRAM {
        if total[n] == 0 {
            // No n-grams of this order exist in the corpus (all lines
            // shorter than n): vacuously perfect, not a zero precision.
            // Keeps BLEU(h, h) = 100 on very short corpora.
            report.precisions[n] = 1.0;
            continue;
        }
        let p = matched[n] as f64 / total[n] as f64;
        report.precisions[n] = p;
        orders += 1;
        if p == 0.0 {
            any_zero = true;
        } else {
            log_sum += p.ln();
        }
    }
    report.bleu = if any_zero || orders == 0 {
        0.0
    } else {
        100.0 * report.brevity_penalty * (log_sum / orders as f64).exp()
    };
    Ok(report)
}

/// Exact-match rate: fraction of hypotheses identical to their reference,
/// token for token.
pub fn exact_match_rate<T: Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.is_empty() || hypotheses.len() != references.len() {
        return Err(Error::Data("empty or mismatched corpus".into()));
    }
    let hits = hypotheses
        .iter()
        .zip(references)
        .filter(|(h, r)| h == r)
        .count();
    Ok(hits as f64 / hypotheses.len() as f64)
}

/// Output of one decoded sentence, as far as latency accounting cares.
pub struct TimedDecode {
    pub tokens: Vec<u32>,
    pub iterations: usize,
    pub decoder_calls: usize,
}

/// Latency fields of a report: wall-clock per sentence at batch size 1,
/// plus mean iteration and decoder-call counts. The decoder runs once on
/// the first sentence as warm-up before timing starts.
pub fn measure_latency<E>(
    mut decode_one: impl FnMut(usize) -> std::result::Result<TimedDecode, E>,
    test_size: usize,
) -> std::result::Result<(f64, f64, f64, Vec<Vec<u32>>), E> {
    assert!(test_size > 0, "empty test set");
    let _warmup = decode_one(0)?;
    let mut outputs = Vec::with_capacity(test_size);
    let mut iterations = 0usize;
    let mut calls = 0usize;
    let started = Instant::now();
    for i in 0..test_size {
        let out = decode_one(i)?;
        iterations += out.iterations;
        calls += out.decoder_calls;
        outputs.push(out.tokens);
    }
    let total_ms = started.elapsed().as_secs_f64() * 1000.0;
    Ok((
        total_ms / test_size as f64,
        iterations as f64 / test_size as f64,
        calls as f64 / test_size as f64,
        outputs,
    ))
}

/// Parameter counts by partition, with a per-component breakdown keyed by
/// the first path segment of each tensor name.
#[derive(Clone, Debug)]
pub struct ParameterAudit {
    pub trainable: usize,
    pub frozen: usize,
    pub ratio: f64,
    pub by_component: Vec<(String, usize, usize)>,
}

impl ParameterAudit {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("component            trainable      frozen\n");
        for (name, trainable, frozen) in &self.by_component {
            out.push_str(&format!("{name:<20} {trainable:>9} {frozen:>11}\n"));
        }
        out.push_str(&format!(
            "total                {:>9} {:>11}   (trainable ratio {:.4})\n",
            self.trainable, self.frozen, self.ratio
        ));
        out
    }
}

pub fn parameter_audit<F: Scalar>(store: &ParameterStore<F>) -> ParameterAudit {
    let mut by: HashMap<String, (usize, usize)> = HashMap::new();
    let mut trainable = 0usize;
    let mut frozen = 0usize;
    for (name, tensor, partition) in store.iter() {
        let component = name.split('.').next().unwrap_or(name).to_string();
        let entry = by.entry(component).or_insert((0, 0));
        match partition {
            Partition::Trainable => {
                trainable += tensor.numel();
                entry.0 += tensor.numel();
            }
            Partition::Frozen => {
                frozen += tensor.numel();
                entry.1 += tensor.numel();
            }
        }
    }
    let mut by_component: Vec<(String, usize, usize)> =
        by.into_iter().map(|(k, (t, f))| (k, t, f)).collect();
    by_component.sort();
    let total = trainable + frozen;
    ParameterAudit {
        trainable,
        frozen,
        ratio: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
        by_component,
    }
}
