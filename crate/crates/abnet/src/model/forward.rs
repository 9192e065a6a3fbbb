use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DecoderKind, MaskMode, ModelConfig, ParameterStore, Partition};
use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::tokenizer::LENGTH;
use crate::{Error, Result};

/// Layer-norm epsilon used everywhere in the assembly.
pub const LN_EPS: f64 = 1e-5;

/// Trace of stack construction, for tests that verify the layer/adapter
/// interleaving order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StackEvent {
    BertLayer(String),
    Adapter(String),
}

/// One forward pass under construction: a graph plus the parameter
/// bindings it has made. Parameters bind once and are shared by every
/// sequence added to the same graph, so a whole batch differentiates in
/// one `backward` call.
pub struct Forward<'a, F: Scalar> {
    pub graph: Graph<F>,
    store: &'a ParameterStore<F>,
    config: &'a ModelConfig,
    bound: BTreeMap<String, NodeId>,
    with_grads: bool,
    trace: Option<Vec<StackEvent>>,
    dropout_rng: Option<ChaCha8Rng>,
    plain_ln: BTreeMap<usize, (NodeId, NodeId)>,
}

impl<'a, F: Scalar> Forward<'a, F> {
    /// Inference-mode pass: no gradient buffers, no dropout.
    pub fn new(store: &'a ParameterStore<F>, config: &'a ModelConfig) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            config,
            bound: BTreeMap::new(),
            with_grads: false,
            trace: None,
            dropout_rng: None,
            plain_ln: BTreeMap::new(),
        }
    }

    /// Training-mode pass: trainable parameters track gradients.
    pub fn for_training(store: &'a ParameterStore<F>, config: &'a ModelConfig) -> Self {
        let mut f = Forward::new(store, config);
        f.with_grads = true;
        f
    }

    /// Activate dropout (no-op when `config.dropout == 0`).
    pub fn with_dropout_rng(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout_rng = Some(rng);
        self
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<StackEvent> {
        self.trace.take().unwrap_or_default()
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Bind a named parameter into the graph (cached per name).
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self.store.get(name)?.clone();
        let requires_grad =
            self.with_grads && self.store.partition(name)? == Partition::Trainable;
        let id = self.graph.leaf(tensor, requires_grad);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// NodeId of a parameter bound earlier in this pass.
    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.bound.get(name).copied()
    }

    fn record(&mut self, event: StackEvent) {
        if let Some(t) = &mut self.trace {
            t.push(event);
        }
    }

    fn eps(&self) -> F {
        F::from_f64(LN_EPS)
    }

    fn ln(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gain = self.param(&format!("{prefix}_g"))?;
        let bias = self.param(&format!("{prefix}_b"))?;
        let eps = self.eps();
        self.graph.layer_norm(x, gain, bias, eps)
    }

    /// Parameter-free layer norm (the encoder adapter's internal LN).
    fn ln_plain(&mut self, x: NodeId) -> Result<NodeId> {
        let width = *self.graph.value(x).shape().last().unwrap();
        let (gain, bias) = match self.plain_ln.get(&width) {
            Some(&pair) => pair,
            None => {
                let gain = self.graph.constant(Tensor::full(&[width], F::ONE));
                let bias = self.graph.constant(Tensor::zeros(&[width]));
                self.plain_ln.insert(width, (gain, bias));
                (gain, bias)
            }
        };
        let eps = self.eps();
        self.graph.layer_norm(x, gain, bias, eps)
    }

    fn maybe_dropout(&mut self, h: NodeId) -> Result<NodeId> {
        let rate = self.config.dropout;
        let rng = match (&mut self.dropout_rng, rate > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(h),
        };
        let n = self.graph.value(h).numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.gen_range(0.0..1.0) >= rate).collect();
        self.graph.dropout(h, keep, F::from_f64(1.0 / (1.0 - rate)))
    }

    /// Token + learned position embedding followed by layer norm. When the
    /// sequence starts with `[LENGTH]` and the store carries the separate
    /// trainable row, that row substitutes for position 0.
    pub fn embed(&mut self, prefix: &str, ids: &[u32]) -> Result<NodeId> {
        let table = self.param(&format!("{prefix}.tok"))?;
        let pos_table = self.param(&format!("{prefix}.pos"))?;
        let max_len = self.graph.value(pos_table).shape()[0];
        if ids.len() > max_len {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds configured maximum {max_len}",
                ids.len()
            )));
        }
        let vocab = self.graph.value(table).shape()[0];
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= vocab {
                return Err(Error::Data(format!(
                    "token id {id} out of range for vocabulary of {vocab}"
                )));
            }
            if id == LENGTH && i > 0 {
                return Err(Error::Contract(
                    "[LENGTH] may only appear as the first token".into(),
                ));
            }
        }
        let length_name = format!("{prefix}.length_tok");
        let tok_emb = if ids.first() == Some(&LENGTH) {
            if !self.store.contains(&length_name) {
                return Err(Error::Contract(
                    "[LENGTH] prefix requires an assembled model with a trainable length row"
                        .into(),
                ));
            }
            let row = self.param(&length_name)?;
            let rest: Vec<usize> = ids[1..].iter().map(|&v| v as usize).collect();
            let rest_emb = self.graph.gather(table, &rest)?;
            self.graph.concat_rows(&[row, rest_emb])?
        } else {
            let idx: Vec<usize> = ids.iter().map(|&v| v as usize).collect();
            self.graph.gather(table, &idx)?
        };
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos_emb = self.graph.gather(pos_table, &positions)?;
        let summed = self.graph.add(tok_emb, pos_emb)?;
        let normed = self.ln(summed, &format!("{prefix}.ln"))?;
        self.maybe_dropout(normed)
    }

    /// Multi-head attention: queries from `q_in`, keys and values from
    /// `kv_in`, additive mask of shape (Lq, Lk), per-head 1/√d_k scaling.
    pub fn multi_head_attention(
        &mut self,
        q_in: NodeId,
        kv_in: NodeId,
        mask: Option<&Tensor<F>>,
        prefix: &str,
    ) -> Result<NodeId> {
        let heads = self.config.n_heads;
        let dk = self.config.head_dim();
        let d = self.config.d_hidden;
        let lq = self.graph.value(q_in).shape()[0];
        let lk = self.graph.value(kv_in).shape()[0];

        let mut project = |input: NodeId, w: &str, b: &str| -> Result<NodeId> {
            let wn = self.param(&format!("{prefix}.{w}"))?;
            let bn = self.param(&format!("{prefix}.{b}"))?;
            let p = self.graph.matmul(input, wn)?;
            self.graph.add_bias(p, bn)
        };
        let q = project(q_in, "wq", "bq")?;
        let k = project(kv_in, "wk", "bk")?;
        let v = project(kv_in, "wv", "bv")?;

        let split = |g: &mut Graph<F>, x: NodeId, len: usize| -> Result<NodeId> {
            let r = g.reshape(x, &[len, heads, dk])?;
            g.swap_axes01(r)
        };
        let qh = split(&mut self.graph, q, lq)?;
        let kh = split(&mut self.graph, k, lk)?;
        let vh = split(&mut self.graph, v, lk)?;

        let scores = self.graph.matmul_opts(qh, kh, false, true)?;
        let scaled = self
            .graph
            .scale(scores, F::from_f64(1.0 / (dk as f64).sqrt()))?;
        let masked = match mask {
            Some(m) => self.graph.add_mask(scaled, m.clone())?,
            None => scaled,
        };
        let probs = self.graph.softmax(masked, 2)?;
        let ctx = self.graph.matmul(probs, vh)?;
        let merged = self.graph.swap_axes01(ctx)?;
        let flat = self.graph.reshape(merged, &[lq, d])?;

        let wo = self.param(&format!("{prefix}.wo"))?;
        let bo = self.param(&format!("{prefix}.bo"))?;
        let o = self.graph.matmul(flat, wo)?;
        let out = self.graph.add_bias(o, bo)?;
        self.maybe_dropout(out)
    }

    /// `ReLU(H·W₁ + b₁)·W₂ + b₂`.
    fn ffn_block(&mut self, h: NodeId, prefix: &str) -> Result<NodeId> {
        let w1 = self.param(&format!("{prefix}.w1"))?;
        let b1 = self.param(&format!("{prefix}.b1"))?;
        let w2 = self.param(&format!("{prefix}.w2"))?;
        let b2 = self.param(&format!("{prefix}.b2"))?;
        let z = self.graph.matmul(h, w1)?;
        let z = self.graph.add_bias(z, b1)?;
        let r = self.graph.relu(z)?;
        let p = self.graph.matmul(r, w2)?;
        let p = self.graph.add_bias(p, b2)?;
        self.maybe_dropout(p)
    }

    /// One BERT layer, post-LN residual form:
    /// `S = LN(h + Attn(h,h,h)); out = LN(S + FFN(S))`.
    pub fn bert_layer(
        &mut self,
        prefix: &str,
        h: NodeId,
        mask: Option<&Tensor<F>>,
    ) -> Result<NodeId> {
        self.record(StackEvent::BertLayer(prefix.to_string()));
        let attn = self.multi_head_attention(h, h, mask, &format!("{prefix}.attn"))?;
        let res1 = self.graph.add(h, attn)?;
        let s = self.ln(res1, &format!("{prefix}.ln1"))?;
        let f = self.ffn_block(s, &format!("{prefix}.ffn"))?;
        let res2 = self.graph.add(s, f)?;
        self.ln(res2, &format!("{prefix}.ln2"))
    }

    /// Encoder adapter: `H + W₂·ReLU(W₁·LN(H) + b₁) + b₂` with a
    /// parameter-free internal layer norm. Zero `W₂`/`b₂` make it the
    /// identity, which is the initial state.
    pub fn encoder_adapter(&mut self, prefix: &str, h: NodeId) -> Result<NodeId> {
        self.record(StackEvent::Adapter(prefix.to_string()));
        let normed = self.ln_plain(h)?;
        let w1 = self.param(&format!("{prefix}.w1"))?;
        let b1 = self.param(&format!("{prefix}.b1"))?;
        let w2 = self.param(&format!("{prefix}.w2"))?;
        let b2 = self.param(&format!("{prefix}.b2"))?;
        let z = self.graph.matmul(normed, w1)?;
        let z = self.graph.add_bias(z, b1)?;
        let r = self.graph.relu(z)?;
        let p = self.graph.matmul(r, w2)?;
        let p = self.graph.add_bias(p, b2)?;
        let p = self.maybe_dropout(p)?;
        self.graph.add(h, p)
    }

    /// Decoder adapter: cross-attention from the decoder hidden state onto
    /// the encoder output, then FFN, each with post-LN residual:
    /// `Z = LN(Attn(y, H_E, H_E) + y); out = LN(FFN(Z) + Z)`.
    /// At init (zero attention output projection and FFN `W₂`) this is
    /// exactly `LN(LN(y))`.
    pub fn decoder_adapter(
        &mut self,
        prefix: &str,
        y_hidden: NodeId,
        enc_out: NodeId,
        enc_pad: Option<&[bool]>,
    ) -> Result<NodeId> {
        self.record(StackEvent::Adapter(prefix.to_string()));
        let lq = self.graph.value(y_hidden).shape()[0];
        let mask = match enc_pad {
            Some(pad) => {
                if pad.iter().all(|&p| p) {
                    return Err(Error::Numeric(
                        "decoder adapter: encoder output is entirely padding".into(),
                    ));
                }
                Some(cross_pad_mask::<F>(lq, pad))
            }
            None => None,
        };
        let attn =
            self.multi_head_attention(y_hidden, enc_out, mask.as_ref(), &format!("{prefix}.attn"))?;
        let res1 = self.graph.add(attn, y_hidden)?;
        let z = self.ln(res1, &format!("{prefix}.ln1"))?;
        let f = self.ffn_block(z, &format!("{prefix}.ffn"))?;
        let res2 = self.graph.add(f, z)?;
        self.ln(res2, &format!("{prefix}.ln2"))
    }

    /// Full encoder stack. `src_ids` must begin with `[LENGTH]`; returns
    /// the final hidden state H_E and the length logits (shape
    /// `(max_tgt_len,)`, class i ↔ length i+1).
    pub fn encoder_forward(&mut self, src_ids: &[u32]) -> Result<(NodeId, NodeId)> {
        if src_ids.first() != Some(&LENGTH) {
            return Err(Error::Contract(
                "encoder input must begin with the [LENGTH] token".into(),
            ));
        }
        let mut h = self.embed("src_embed", src_ids)?;
        for l in 1..=self.config.n_enc_layers {
            h = self.bert_layer(&format!("enc.{l}"), h, None)?;
            if self.config.enc_adapter_layers.contains(&l) {
                h = self.encoder_adapter(&format!("enc.{l}.adapter"), h)?;
            }
        }
        let len_vec = self.graph.slice_rows(h, 0, 1)?;
        let w = self.param("length_head.w")?;
        let b = self.param("length_head.b")?;
        let logits = self.graph.matmul(len_vec, w)?;
        let logits = self.graph.add_bias(logits, b)?;
        let logits = self.graph.reshape(logits, &[self.config.max_tgt_len])?;
        Ok((h, logits))
    }

    /// Adapter-BERT decoder stack over a target canvas; self-attention is
    /// bidirectional or causal per the config. Output logits are tied to
    /// the target token embedding.
    pub fn decoder_forward(
        &mut self,
        tgt_ids: &[u32],
        enc_out: NodeId,
        enc_pad: Option<&[bool]>,
    ) -> Result<NodeId> {
        if self.config.decoder_kind != DecoderKind::AdapterBert {
            return Err(Error::Contract(
                "decoder_forward requires the adapter-bert decoder kind".into(),
            ));
        }
        if tgt_ids.len() > self.config.max_tgt_len {
            return Err(Error::Length(format!(
                "target of {} tokens exceeds max_tgt_len {}",
                tgt_ids.len(),
                self.config.max_tgt_len
            )));
        }
        let mut h = self.embed("tgt_embed", tgt_ids)?;
        let mask = match self.config.decoder_mask {
            MaskMode::Bidirectional => None,
            MaskMode::Causal => Some(causal_mask::<F>(tgt_ids.len())),
        };
        for l in 1..=self.config.n_dec_layers {
            h = self.bert_layer(&format!("dec.{l}"), h, mask.as_ref())?;
            if self.config.dec_adapter_layers.contains(&l) {
                h = self.decoder_adapter(&format!("dec.{l}.adapter"), h, enc_out, enc_pad)?;
            }
        }
        let table = self.param("tgt_embed.tok")?;
        self.graph.matmul_opts(h, table, false, true)
    }

    /// From-scratch autoregressive decoder: causal self-attention, then
    /// cross-attention on H_E, then FFN, each with post-LN residual.
    /// `input_ids` is the right-shifted target (starts with `[BOS]`).
    pub fn transformer_ar_forward(
        &mut self,
        input_ids: &[u32],
        enc_out: NodeId,
        enc_pad: Option<&[bool]>,
    ) -> Result<NodeId> {
        if self.config.decoder_kind != DecoderKind::TransformerAr {
            return Err(Error::Contract(
                "transformer_ar_forward requires the transformer-ar decoder kind".into(),
            ));
        }
        if input_ids.len() > self.config.max_tgt_len + 1 {
            return Err(Error::Length(format!(
                "decoder input of {} tokens exceeds max_tgt_len + 1 = {}",
                input_ids.len(),
                self.config.max_tgt_len + 1
            )));
        }
        let lq = input_ids.len();
        let mut h = self.embed("tgt_embed", input_ids)?;
        let causal = causal_mask::<F>(lq);
        let cross = enc_pad.map(|pad| cross_pad_mask::<F>(lq, pad));
        for l in 1..=self.config.n_dec_layers {
            let p = format!("dec.{l}");
            let sa = self.multi_head_attention(h, h, Some(&causal), &format!("{p}.self_attn"))?;
            let r1 = self.graph.add(h, sa)?;
            let s1 = self.ln(r1, &format!("{p}.ln1"))?;
            let ca =
                self.multi_head_attention(s1, enc_out, cross.as_ref(), &format!("{p}.cross_attn"))?;
            let r2 = self.graph.add(s1, ca)?;
            let s2 = self.ln(r2, &format!("{p}.ln2"))?;
            let f = self.ffn_block(s2, &format!("{p}.ffn"))?;
            let r3 = self.graph.add(s2, f)?;
            h = self.ln(r3, &format!("{p}.ln3"))?;
        }
        let table = self.param("tgt_embed.tok")?;
        self.graph.matmul_opts(h, table, false, true)
    }

    /// Single-stack forward for MLM pre-training (side-neutral parameter
    /// names); returns logits tied to the stack's own token embedding.
    pub fn backbone_forward(&mut self, ids: &[u32], layers: usize) -> Result<NodeId> {
        let mut h = self.embed("embed", ids)?;
        for l in 1..=layers {
            h = self.bert_layer(&format!("layer.{l}"), h, None)?;
        }
        let table = self.param("embed.tok")?;
        self.graph.matmul_opts(h, table, false, true)
    }
}

/// Upper-triangular additive mask: position i may attend to j ≤ i.
pub fn causal_mask<F: Scalar>(len: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = F::neg_infinity();
        }
    }
    Tensor::new(vec![len, len], data).expect("mask shape")
}

/// Additive cross-attention mask hiding padded encoder positions from
/// every query.
pub fn cross_pad_mask<F: Scalar>(q_len: usize, pad: &[bool]) -> Tensor<F> {
    let lk = pad.len();
    let mut data = vec![F::ZERO; q_len * lk];
    for (j, &is_pad) in pad.iter().enumerate() {
        if is_pad {
            for i in 0..q_len {
                data[i * lk + j] = F::neg_infinity();
            }
        }
    }
    Tensor::new(vec![q_len, lk], data).expect("mask shape")
}
