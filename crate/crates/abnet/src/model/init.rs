use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DecoderKind, ModelConfig, ParameterStore, Partition, Side};
use crate::numerics::{Scalar, Tensor};
use crate::tokenizer::LENGTH;
use crate::Result;

/// Deterministic stream-tagged rng: the same (seed, tag) always yields the
/// same stream, and distinct tags decorrelate the streams.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn xavier<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<F> {
    let fan_in = shape[0] as f64;
    let fan_out = *shape.last().unwrap() as f64;
    let a = (6.0 / (fan_in + fan_out)).sqrt();
    Tensor::rand_uniform(shape, -a, a, rng)
}

/// Insert the four weight matrices and biases of an attention block.
fn insert_attention<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d: usize,
    zero_out_proj: bool,
    rng: &mut ChaCha8Rng,
) {
    for w in ["wq", "wk", "wv"] {
        store.insert(
            format!("{prefix}.{w}"),
            xavier(&[d, d], rng),
            Partition::Trainable,
        );
    }
    let wo = if zero_out_proj {
        Tensor::zeros(&[d, d])
    } else {
        xavier(&[d, d], rng)
    };
    store.insert(format!("{prefix}.wo"), wo, Partition::Trainable);
    for b in ["bq", "bk", "bv", "bo"] {
        store.insert(
            format!("{prefix}.{b}"),
            Tensor::zeros(&[d]),
            Partition::Trainable,
        );
    }
}

fn insert_ffn<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    d_in: usize,
    d_mid: usize,
    zero_w2: bool,
    rng: &mut ChaCha8Rng,
) {
    store.insert(
        format!("{prefix}.w1"),
        xavier(&[d_in, d_mid], rng),
        Partition::Trainable,
    );
    store.insert(
        format!("{prefix}.b1"),
        Tensor::zeros(&[d_mid]),
        Partition::Trainable,
    );
    let w2 = if zero_w2 {
        Tensor::zeros(&[d_mid, d_in])
    } else {
        xavier(&[d_mid, d_in], rng)
    };
    store.insert(format!("{prefix}.w2"), w2, Partition::Trainable);
    store.insert(
        format!("{prefix}.b2"),
        Tensor::zeros(&[d_in]),
        Partition::Trainable,
    );
}

fn insert_ln<F: Scalar>(store: &mut ParameterStore<F>, prefix: &str, d: usize) {
    store.insert(
        format!("{prefix}_g"),
        Tensor::full(&[d], F::ONE),
        Partition::Trainable,
    );
    store.insert(
        format!("{prefix}_b"),
        Tensor::zeros(&[d]),
        Partition::Trainable,
    );
}

fn insert_embedding<F: Scalar>(
    store: &mut ParameterStore<F>,
    prefix: &str,
    vocab: usize,
    max_len: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert(
        format!("{prefix}.tok"),
        xavier(&[vocab, d], rng),
        Partition::Trainable,
    );
    store.insert(
        format!("{prefix}.pos"),
        xavier(&[max_len, d], rng),
        Partition::Trainable,
    );
    insert_ln(store, &format!("{prefix}.ln"), d);
}

/// Randomly initialized single BERT stack for one side, with the
/// side-neutral names a pre-training checkpoint carries (`embed.*`,
/// `layer.{l}.*`). All parameters trainable.
pub fn init_backbone<F: Scalar>(config: &ModelConfig, side: Side, seed_tag: &str) -> ParameterStore<F> {
    let mut rng = seeded_rng(config.seed, seed_tag);
    let d = config.d_hidden;
    let mut store = ParameterStore::new();
    insert_embedding(
        &mut store,
        "embed",
        config.vocab_for(side),
        config.max_len_for(side),
        d,
        &mut rng,
    );
    for l in 1..=config.layers_for(side) {
        let p = format!("layer.{l}");
        insert_attention(&mut store, &format!("{p}.attn"), d, false, &mut rng);
        insert_ln(&mut store, &format!("{p}.ln1"), d);
        insert_ffn(&mut store, &format!("{p}.ffn"), d, config.d_ffn, false, &mut rng);
        insert_ln(&mut store, &format!("{p}.ln2"), d);
    }
    store
}

fn copy_backbone<F: Scalar>(
    dst: &mut ParameterStore<F>,
    backbone: &ParameterStore<F>,
    embed_prefix: &str,
    stack_prefix: &str,
    layers: usize,
) -> Result<()> {
    for suffix in ["tok", "pos", "ln_g", "ln_b"] {
        dst.insert(
            format!("{embed_prefix}.{suffix}"),
            backbone.get(&format!("embed.{suffix}"))?.clone(),
            Partition::Frozen,
        );
    }
    for l in 1..=layers {
        for suffix in [
            "attn.wq", "attn.wk", "attn.wv", "attn.wo", "attn.bq", "attn.bk", "attn.bv",
            "attn.bo", "ln1_g", "ln1_b", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2_g",
            "ln2_b",
        ] {
            dst.insert(
                format!("{stack_prefix}.{l}.{suffix}"),
                backbone.get(&format!("layer.{l}.{suffix}"))?.clone(),
                Partition::Frozen,
            );
        }
    }
    Ok(())
}

/// Assemble the full model from two pre-trained backbones.
///
/// Backbone parameters come in frozen; adapters, the length head and the
/// `[LENGTH]` embedding row are created fresh and trainable. Adapter
/// output projections start at zero so every adapter is exactly
/// pass-through (encoder) or pure post-normalization (decoder) before the
/// first update. With the `TransformerAr` decoder kind the target
/// backbone is ignored and a standard decoder is initialized from
/// scratch, fully trainable.
pub fn assemble<F: Scalar>(
    xbert: &ParameterStore<F>,
    ybert: &ParameterStore<F>,
    config: &ModelConfig,
) -> Result<ParameterStore<F>> {
    config.validate()?;
    let d = config.d_hidden;
    let mut rng = seeded_rng(config.seed, "assemble-adapters");
    let mut store = ParameterStore::new();

    copy_backbone(&mut store, xbert, "src_embed", "enc", config.n_enc_layers)?;

    // The [LENGTH] token was reserved but unused during pre-training; its
    // row becomes the one trainable embedding entry.
    let tok = store.get("src_embed.tok")?;
    let row = tok.row(LENGTH as usize).to_vec();
    store.insert(
        "src_embed.length_tok",
        Tensor::matrix(1, d, row)?,
        Partition::Trainable,
    );

    for &l in &config.enc_adapter_layers {
        // Encoder adapter: bottleneck FFN with zeroed final projection.
        insert_ffn(
            &mut store,
            &format!("enc.{l}.adapter"),
            d,
            config.d_adapter_enc,
            true,
            &mut rng,
        );
    }

    match config.decoder_kind {
        DecoderKind::AdapterBert => {
            copy_backbone(&mut store, ybert, "tgt_embed", "dec", config.n_dec_layers)?;
            for &l in &config.dec_adapter_layers {
                let p = format!("dec.{l}.adapter");
                insert_attention(&mut store, &format!("{p}.attn"), d, true, &mut rng);
                insert_ln(&mut store, &format!("{p}.ln1"), d);
                insert_ffn(
                    &mut store,
                    &format!("{p}.ffn"),
                    d,
                    config.d_adapter_ffn,
                    true,
                    &mut rng,
                );
                insert_ln(&mut store, &format!("{p}.ln2"), d);
            }
        }
        DecoderKind::TransformerAr => {
            insert_embedding(
                &mut store,
                "tgt_embed",
                config.tgt_vocab,
                config.max_len_for(Side::Target),
                d,
                &mut rng,
            );
            for l in 1..=config.n_dec_layers {
                let p = format!("dec.{l}");
                insert_attention(&mut store, &format!("{p}.self_attn"), d, false, &mut rng);
                insert_ln(&mut store, &format!("{p}.ln1"), d);
                insert_attention(&mut store, &format!("{p}.cross_attn"), d, false, &mut rng);
                insert_ln(&mut store, &format!("{p}.ln2"), d);
                insert_ffn(&mut store, &format!("{p}.ffn"), d, config.d_ffn, false, &mut rng);
                insert_ln(&mut store, &format!("{p}.ln3"), d);
            }
        }
    }

    store.insert(
        "length_head.w",
        xavier(&[d, config.max_tgt_len], &mut rng),
        Partition::Trainable,
    );
    store.insert(
        "length_head.b",
        Tensor::zeros(&[config.max_tgt_len]),
        Partition::Trainable,
    );

    Ok(store)
}

/// Partition rule for adapters-only fine-tuning.
///
/// With the adapter-BERT decoder the trainable set is exactly the adapter
/// parameters, the length head, and the `[LENGTH]` embedding row. With the
/// from-scratch autoregressive decoder the whole decoder (including its
/// embedding and tied head) is additionally trainable, and the unused
/// length head stays frozen.
pub fn adapters_only_rule(kind: DecoderKind) -> impl Fn(&str) -> Partition {
    move |name: &str| {
        let trainable = match kind {
            DecoderKind::AdapterBert => {
                name.contains(".adapter.")
                    || name.starts_with("length_head.")
                    || name == "src_embed.length_tok"
            }
            DecoderKind::TransformerAr => {
                name.contains(".adapter.")
                    || name == "src_embed.length_tok"
                    || name.starts_with("dec.")
                    || name.starts_with("tgt_embed.")
            }
        };
        if trainable {
            Partition::Trainable
        } else {
            Partition::Frozen
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_rng_is_stream_separated() {
        use rand::RngCore;
        let mut a = seeded_rng(7, "x");
        let mut b = seeded_rng(7, "x");
        let mut c = seeded_rng(7, "y");
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn assembled_store_has_zeroed_adapter_projections() {
        let cfg = ModelConfig::desk_default(30, 30);
        let x = init_backbone::<f32>(&cfg, Side::Source, "x");
        let y = init_backbone::<f32>(&cfg, Side::Target, "y");
        let store = assemble(&x, &y, &cfg).unwrap();
        for &l in &cfg.enc_adapter_layers {
            let w2 = store.get(&format!("enc.{l}.adapter.w2")).unwrap();
            assert!(w2.data().iter().all(|&v| v == 0.0));
        }
        for &l in &cfg.dec_adapter_layers {
            let wo = store.get(&format!("dec.{l}.adapter.attn.wo")).unwrap();
            assert!(wo.data().iter().all(|&v| v == 0.0));
            let w2 = store.get(&format!("dec.{l}.adapter.ffn.w2")).unwrap();
            assert!(w2.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn adapters_only_partition_matches_spec_set() {
        let cfg = ModelConfig::desk_default(30, 30);
        let x = init_backbone::<f32>(&cfg, Side::Source, "x");
        let y = init_backbone::<f32>(&cfg, Side::Target, "y");
        let mut store = assemble(&x, &y, &cfg).unwrap();
        store.repartition(adapters_only_rule(DecoderKind::AdapterBert));
        for name in store.trainable_names() {
            assert!(
                name.contains(".adapter.")
                    || name.starts_with("length_head.")
                    || name == "src_embed.length_tok",
                "unexpected trainable tensor {name}"
            );
        }
        // Every adapter layer contributes at least one trainable tensor.
        for &l in &cfg.enc_adapter_layers {
            assert_eq!(
                store.partition(&format!("enc.{l}.adapter.w1")).unwrap(),
                Partition::Trainable
            );
        }
    }

    #[test]
    fn length_tok_starts_as_reserved_row() {
        let cfg = ModelConfig::desk_default(30, 30);
        let x = init_backbone::<f32>(&cfg, Side::Source, "x");
        let y = init_backbone::<f32>(&cfg, Side::Target, "y");
        let store = assemble(&x, &y, &cfg).unwrap();
        let row = store.get("src_embed.tok").unwrap().row(LENGTH as usize);
        assert_eq!(store.get("src_embed.length_tok").unwrap().data(), row);
    }
}
