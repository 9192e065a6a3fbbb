use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{LENGTH, MASK};
use crate::{Error, Result};

/// One masked sequence (plus its source pair when fine-tuning).
///
/// Batches are ragged — each item keeps its own length — so mask
/// positions can never touch padding by construction.
#[derive(Clone, Debug)]
pub struct MaskedItem {
    /// Token ids with `[MASK]` substituted at the chosen positions.
    pub input: Vec<u32>,
    /// The uncorrupted ids.
    pub original: Vec<u32>,
    /// Mask-position indicator, parallel to `input`.
    pub masked: Vec<bool>,
    /// Fine-tune only: source ids prefixed with `[LENGTH]`.
    pub src: Option<Vec<u32>>,
}

impl MaskedItem {
    pub fn target_len(&self) -> usize {
        self.original.len()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, Default)]
pub struct MaskedBatch {
    pub items: Vec<MaskedItem>,
}

/// Choose `count` distinct positions in `0..len`, in a deterministic
/// partial Fisher-Yates order driven by `rng`.
fn sample_positions(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.gen_range(i..len);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

fn mask_item(seq: &[u32], count: usize, rng: &mut ChaCha8Rng) -> MaskedItem {
    let positions = sample_positions(seq.len(), count, rng);
    let mut input = seq.to_vec();
    let mut masked = vec![false; seq.len()];
    for &p in &positions {
        input[p] = MASK;
        masked[p] = true;
    }
    MaskedItem {
        input,
        original: seq.to_vec(),
        masked,
        src: None,
    }
}

/// MLM pre-training batch: per sequence, `⌈fraction·len⌉` positions
/// (at least one) are replaced by `[MASK]`.
pub fn sample_mlm_batch(
    sequences: &[Vec<u32>],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch> {
    let mut items = Vec::with_capacity(sequences.len());
    for seq in sequences {
        if seq.is_empty() {
            return Err(Error::Data("cannot mask an empty sequence".into()));
        }
        let count = ((fraction * seq.len() as f64).ceil() as usize)
            .max(1)
            .min(seq.len());
        items.push(mask_item(seq, count, rng));
    }
    Ok(MaskedBatch { items })
}

/// Conditional-MLM fine-tuning batch: the masked count is uniform on
/// 1..=|y| and the source is prefixed with `[LENGTH]`.
pub fn sample_cmlm_batch(
    pairs: &[(Vec<u32>, Vec<u32>)],
    rng: &mut ChaCha8Rng,
) -> Result<MaskedBatch> {
    let mut items = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        if tgt.is_empty() {
            return Err(Error::Data("cannot mask an empty target".into()));
        }
        let count = rng.gen_range(1..=tgt.len());
        let mut item = mask_item(tgt, count, rng);
        let mut prefixed = Vec::with_capacity(src.len() + 1);
        prefixed.push(LENGTH);
        prefixed.extend_from_slice(src);
        item.src = Some(prefixed);
        items.push(item);
    }
    Ok(MaskedBatch { items })
}

/// Batch for the autoregressive decoder variants: no masking, the loss
/// covers every target position (teacher forcing).
pub fn ar_batch(pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<MaskedBatch> {
    let mut items = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        if tgt.is_empty() {
            return Err(Error::Data("cannot train on an empty target".into()));
        }
        let mut prefixed = Vec::with_capacity(src.len() + 1);
        prefixed.push(LENGTH);
        prefixed.extend_from_slice(src);
        items.push(MaskedItem {
            input: tgt.clone(),
            original: tgt.clone(),
            masked: vec![true; tgt.len()],
            src: Some(prefixed),
        });
    }
    Ok(MaskedBatch { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_rng;

    #[test]
    fn single_token_sequence_masks_exactly_one() {
        let mut rng = seeded_rng(1, "t");
        let b = sample_mlm_batch(&[vec![9]], 0.15, &mut rng).unwrap();
        assert_eq!(b.items[0].masked_count(), 1);
        assert_eq!(b.items[0].input, vec![MASK]);
        assert_eq!(b.items[0].original, vec![9]);
    }

    #[test]
    fn fraction_rule_is_ceiling() {
        let mut rng = seeded_rng(2, "t");
        let seq: Vec<u32> = (10..30).collect(); // len 20
        let b = sample_mlm_batch(&[seq], 0.15, &mut rng).unwrap();
        assert_eq!(b.items[0].masked_count(), 3, "⌈0.15·20⌉ = 3");
    }

    #[test]
    fn empty_sequence_is_data_error() {
        let mut rng = seeded_rng(3, "t");
        assert!(matches!(
            sample_mlm_batch(&[vec![]], 0.15, &mut rng),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            sample_cmlm_batch(&[(vec![7], vec![])], &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn mlm_per_position_mask_frequency_matches_ceiling_rule() {
        // len 10, fraction 0.15 → ⌈1.5⌉ = 2 masked → frequency 0.2.
        let mut rng = seeded_rng(4, "mc");
        let seq: Vec<u32> = (10..20).collect();
        let trials = 100_000;
        let mut hits = vec![0u32; 10];
        for _ in 0..trials {
            let b = sample_mlm_batch(std::slice::from_ref(&seq), 0.15, &mut rng).unwrap();
            for (p, &m) in b.items[0].masked.iter().enumerate() {
                if m {
                    hits[p] += 1;
                }
            }
        }
        for (p, &h) in hits.iter().enumerate() {
            let freq = f64::from(h) / trials as f64;
            assert!(
                (freq - 0.2).abs() < 0.01,
                "position {p} masked with frequency {freq}"
            );
        }
    }

    #[test]
    fn cmlm_single_token_target_always_masks_it() {
        let mut rng = seeded_rng(5, "t");
        for _ in 0..50 {
            let b = sample_cmlm_batch(&[(vec![8], vec![9])], &mut rng).unwrap();
            assert_eq!(b.items[0].masked_count(), 1);
        }
    }

    #[test]
    fn cmlm_mask_count_is_uniform() {
        let mut rng = seeded_rng(6, "mc");
        let pair = (vec![8u32, 9, 10, 11], vec![20u32, 21, 22, 23]);
        let trials = 100_000;
        let mut counts = [0u32; 4];
        for _ in 0..trials {
            let b = sample_cmlm_batch(std::slice::from_ref(&pair), &mut rng).unwrap();
            counts[b.items[0].masked_count() - 1] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let p = f64::from(c) / trials as f64;
            assert!((p - 0.25).abs() < 0.01, "P(m={}) = {p}", k + 1);
        }
    }

    #[test]
    fn cmlm_mask_count_uniform_by_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let mut rng = seeded_rng(7, "chi");
        let y: Vec<u32> = (20..28).collect(); // |y| = 8
        let pair = (vec![8u32, 9], y);
        let trials = 100_000usize;
        let mut counts = vec![0f64; 8];
        for _ in 0..trials {
            let b = sample_cmlm_batch(std::slice::from_ref(&pair), &mut rng).unwrap();
            counts[b.items[0].masked_count() - 1] += 1.0;
        }
        let expected = trials as f64 / 8.0;
        let stat: f64 = counts
            .iter()
            .map(|&o| (o - expected) * (o - expected) / expected)
            .sum();
        let dist = ChiSquared::new(7.0).unwrap();
        let p_value = 1.0 - dist.cdf(stat);
        assert!(p_value > 0.01, "chi-square stat {stat}, p = {p_value}");
    }

    #[test]
    fn cmlm_prefixes_source_with_length_token() {
        let mut rng = seeded_rng(8, "t");
        let b = sample_cmlm_batch(&[(vec![8, 9], vec![20, 21])], &mut rng).unwrap();
        assert_eq!(b.items[0].src.as_ref().unwrap()[0], LENGTH);
        assert_eq!(&b.items[0].src.as_ref().unwrap()[1..], &[8, 9]);
    }

    #[test]
    fn ragged_batches_have_no_padding_to_collide_with() {
        let mut rng = seeded_rng(9, "t");
        let pairs = vec![
            (vec![8u32], vec![20u32]),
            (vec![8, 9, 10], vec![20, 21, 22, 23, 24]),
        ];
        let b = sample_cmlm_batch(&pairs, &mut rng).unwrap();
        for (item, (_, tgt)) in b.items.iter().zip(&pairs) {
            assert_eq!(item.masked.len(), tgt.len());
            assert_eq!(item.input.len(), tgt.len());
        }
    }
}
