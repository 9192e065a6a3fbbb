use crate::{Error, Result};

/// Which side of the parallel pair a backbone serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Decoder self-attention masking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// All-zeros mask: every position attends everywhere (Mask-Predict).
    Bidirectional,
    /// Upper-triangular −∞ mask: no attention to future positions.
    Causal,
}

/// Decoder architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Frozen YBERT stack with cross-attention adapters.
    AdapterBert,
    /// Standard autoregressive transformer decoder trained from scratch;
    /// the encoder keeps its frozen backbone and adapters.
    TransformerAr,
}

/// Architecture hyperparameters of the full assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_hidden: usize,
    pub n_heads: usize,
    /// Encoder layers (M).
    pub n_enc_layers: usize,
    /// Decoder layers (N).
    pub n_dec_layers: usize,
    /// Width of the backbone BERT-layer feed-forward networks.
    pub d_ffn: usize,
    /// Encoder-adapter bottleneck width.
    pub d_adapter_enc: usize,
    /// Decoder-adapter FFN width; defaults to the backbone `d_ffn`.
    pub d_adapter_ffn: usize,
    /// 1-based encoder layer indices that carry an adapter.
    pub enc_adapter_layers: Vec<usize>,
    /// 1-based decoder layer indices that carry an adapter.
    pub dec_adapter_layers: Vec<usize>,
    /// Maximum source sequence length including the `[LENGTH]` prefix.
    pub max_src_len: usize,
    /// Maximum target sequence length (the span of the length classifier).
    pub max_tgt_len: usize,
    pub decoder_mask: MaskMode,
    pub decoder_kind: DecoderKind,
    /// Dropout rate; 0 disables dropout entirely.
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough that the full pipeline runs on
    /// one CPU core in minutes. Adapters sit on the top half of each
    /// stack, keeping the trainable fraction below a quarter of the
    /// parameters.
    pub fn desk_default(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_hidden: 64,
            n_heads: 4,
            n_enc_layers: 4,
            n_dec_layers: 4,
            d_ffn: 128,
            d_adapter_enc: 32,
            d_adapter_ffn: 128,
            enc_adapter_layers: vec![3, 4],
            dec_adapter_layers: vec![3, 4],
            max_src_len: 32,
            max_tgt_len: 24,
            decoder_mask: MaskMode::Bidirectional,
            decoder_kind: DecoderKind::AdapterBert,
            dropout: 0.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_hidden == 0 || self.n_heads == 0 || self.d_hidden % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_hidden {} must be a positive multiple of n_heads {}",
                self.d_hidden, self.n_heads
            )));
        }
        for &l in &self.enc_adapter_layers {
            if l == 0 || l > self.n_enc_layers {
                return Err(Error::Config(format!(
                    "encoder adapter layer {l} outside 1..={}",
                    self.n_enc_layers
                )));
            }
        }
        for &l in &self.dec_adapter_layers {
            if l == 0 || l > self.n_dec_layers {
                return Err(Error::Config(format!(
                    "decoder adapter layer {l} outside 1..={}",
                    self.n_dec_layers
                )));
            }
        }
        if self.src_vocab < crate::tokenizer::NUM_SPECIALS
            || self.tgt_vocab < crate::tokenizer::NUM_SPECIALS
        {
            return Err(Error::Config(
                "vocab sizes must cover the six reserved special tokens".into(),
            ));
        }
        if self.max_tgt_len == 0 || self.max_src_len < 2 {
            return Err(Error::Config(
                "max_src_len must cover the [LENGTH] prefix and max_tgt_len must be positive"
                    .into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.n_heads
    }

    pub fn vocab_for(&self, side: Side) -> usize {
        match side {
            Side::Source => self.src_vocab,
            Side::Target => self.tgt_vocab,
        }
    }

    pub fn layers_for(&self, side: Side) -> usize {
        match side {
            Side::Source => self.n_enc_layers,
            Side::Target => self.n_dec_layers,
        }
    }

    pub fn max_len_for(&self, side: Side) -> usize {
        match side {
            // +1: the autoregressive decoder input is shifted right by [BOS].
            Side::Source => self.max_src_len,
            Side::Target => self.max_tgt_len + 1,
        }
    }

    /// `key = value` serialization embedded in checkpoints.
    pub fn to_config_text(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "src_vocab = {}\ntgt_vocab = {}\nd_hidden = {}\nn_heads = {}\nn_enc_layers = {}\n\
             n_dec_layers = {}\nd_ffn = {}\nd_adapter_enc = {}\nd_adapter_ffn = {}\n\
             enc_adapter_layers = {}\ndec_adapter_layers = {}\nmax_src_len = {}\n\
             max_tgt_len = {}\ndecoder_mask = {}\ndecoder_kind = {}\ndropout = {}\nseed = {}\n",
            self.src_vocab,
            self.tgt_vocab,
            self.d_hidden,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ffn,
            self.d_adapter_enc,
            self.d_adapter_ffn,
            join(&self.enc_adapter_layers),
            join(&self.dec_adapter_layers),
            self.max_src_len,
            self.max_tgt_len,
            match self.decoder_mask {
                MaskMode::Bidirectional => "bidirectional",
                MaskMode::Causal => "causal",
            },
            match self.decoder_kind {
                DecoderKind::AdapterBert => "adapter-bert",
                DecoderKind::TransformerAr => "transformer-ar",
            },
            self.dropout,
            self.seed,
        )
    }

    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk_default(0, 0);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} is not `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single `key = value` setting; unknown keys name themselves
    /// in the error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("key {key}: invalid number {v:?}")))
        };
        let parse_list = |v: &str| -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("key {key}: invalid list entry {s:?}")))
                })
                .collect()
        };
        match key {
            "src_vocab" => self.src_vocab = parse_usize(value)?,
            "tgt_vocab" => self.tgt_vocab = parse_usize(value)?,
            "d_hidden" => self.d_hidden = parse_usize(value)?,
            "n_heads" => self.n_heads = parse_usize(value)?,
            "n_enc_layers" => self.n_enc_layers = parse_usize(value)?,
            "n_dec_layers" => self.n_dec_layers = parse_usize(value)?,
            "d_ffn" => self.d_ffn = parse_usize(value)?,
            "d_adapter_enc" => self.d_adapter_enc = parse_usize(value)?,
            "d_adapter_ffn" => self.d_adapter_ffn = parse_usize(value)?,
            "enc_adapter_layers" => self.enc_adapter_layers = parse_list(value)?,
            "dec_adapter_layers" => self.dec_adapter_layers = parse_list(value)?,
            "max_src_len" => self.max_src_len = parse_usize(value)?,
            "max_tgt_len" => self.max_tgt_len = parse_usize(value)?,
            "decoder_mask" => {
                self.decoder_mask = match value {
                    "bidirectional" => MaskMode::Bidirectional,
                    "causal" => MaskMode::Causal,
                    other => {
                        return Err(Error::Config(format!(
                            "key decoder_mask: unknown mode {other:?}"
                        )))
                    }
                }
            }
            "decoder_kind" => {
                self.decoder_kind = match value {
                    "adapter-bert" => DecoderKind::AdapterBert,
                    "transformer-ar" => DecoderKind::TransformerAr,
                    other => {
                        return Err(Error::Config(format!(
                            "key decoder_kind: unknown kind {other:?}"
                        )))
                    }
                }
            }
            "dropout" => {
                self.dropout = value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("key dropout: invalid number {value:?}")))?
            }
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("key seed: invalid number {value:?}")))?
            }
            other => return Err(Error::Config(format!("unknown model config key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_validates() {
        ModelConfig::desk_default(30, 30).validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = ModelConfig::desk_default(30, 30);
        cfg.n_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_adapter_index_out_of_range() {
        let mut cfg = ModelConfig::desk_default(30, 30);
        cfg.enc_adapter_layers = vec![5];
        assert!(cfg.validate().is_err());
        cfg.enc_adapter_layers = vec![0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_text_roundtrip() {
        let mut cfg = ModelConfig::desk_default(31, 29);
        cfg.decoder_kind = DecoderKind::TransformerAr;
        cfg.decoder_mask = MaskMode::Causal;
        cfg.enc_adapter_layers = vec![1, 2, 3, 4];
        let text = cfg.to_config_text();
        let back = ModelConfig::from_config_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ModelConfig::desk_default(30, 30)
            .set("d_hid", "3")
            .unwrap_err();
        assert!(err.to_string().contains("d_hid"));
    }
}
