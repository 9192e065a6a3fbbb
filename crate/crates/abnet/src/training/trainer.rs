use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::loss::{finetune_loss, mlm_loss};
use super::{sample_cmlm_batch, sample_mlm_batch, Adam, MaskedBatch};
use crate::model::{
    adapters_only_rule, seeded_rng, Forward, ModelConfig, ParameterStore, Partition, Side,
};
use crate::numerics::Scalar;
use crate::{Error, Result};

/// Which parameters train, and against which objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Single-backbone masked language modeling; everything trainable.
    PretrainMlm,
    /// Frozen backbones, trainable adapters/length head/[LENGTH] row.
    FinetuneAdapters,
    /// Assembled model with every parameter unfrozen.
    FinetuneFull,
    /// Assembled model from random initialization, every parameter
    /// trainable.
    TrainScratch,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::PretrainMlm => "pretrain-mlm",
            TrainMode::FinetuneAdapters => "finetune-adapters",
            TrainMode::FinetuneFull => "finetune-full",
            TrainMode::TrainScratch => "train-scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain-mlm" => Ok(TrainMode::PretrainMlm),
            "finetune-adapters" => Ok(TrainMode::FinetuneAdapters),
            "finetune-full" => Ok(TrainMode::FinetuneFull),
            "train-scratch" => Ok(TrainMode::TrainScratch),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// MLM masking fraction (pre-training only).
    pub mlm_mask_fraction: f64,
    /// λ, the weight of the length loss in the fine-tune objective.
    pub length_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::FinetuneAdapters,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 1,
            mlm_mask_fraction: 0.15,
            length_loss_weight: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mlm_mask_fraction > 0.0 && self.mlm_mask_fraction < 1.0) {
            return Err(Error::Config(format!(
                "mlm_mask_fraction {} outside (0, 1)",
                self.mlm_mask_fraction
            )));
        }
        if self.length_loss_weight < 0.0 {
            return Err(Error::Config(format!(
                "length_loss_weight {} must be nonnegative",
                self.length_loss_weight
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One metrics-log record; the log format is one tab-separated line per
/// step: step, mode, loss, word-loss, length-loss, wall-ms.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub mode: TrainMode,
    pub loss: f64,
    pub word_loss: f64,
    pub length_loss: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step\tmode\tloss\tword-loss\tlength-loss\twall-ms";

impl StepRecord {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.step,
            self.mode.as_str(),
            self.loss,
            self.word_loss,
            self.length_loss,
            self.wall_ms
        )
    }
}

/// Step-level training driver: builds one graph per batch, runs backward,
/// and applies Adam to the TRAINABLE partition. Owns the optimizer state;
/// the partition is assigned once at construction from the mode.
pub struct Trainer<'a, F: Scalar> {
    store: &'a mut ParameterStore<F>,
    model_cfg: &'a ModelConfig,
    train_cfg: TrainConfig,
    adam: Adam<F>,
    trainable: Vec<String>,
}

impl<'a, F: Scalar> Trainer<'a, F> {
    pub fn new(
        store: &'a mut ParameterStore<F>,
        model_cfg: &'a ModelConfig,
        train_cfg: TrainConfig,
    ) -> Result<Self> {
        train_cfg.validate()?;
        model_cfg.validate()?;
        match train_cfg.mode {
            TrainMode::FinetuneAdapters => {
                store.repartition(adapters_only_rule(model_cfg.decoder_kind))
            }
            TrainMode::PretrainMlm | TrainMode::FinetuneFull | TrainMode::TrainScratch => {
                store.repartition(|_| Partition::Trainable)
            }
        }
        let adam = Adam::new(
            train_cfg.lr,
            train_cfg.beta1,
            train_cfg.beta2,
            train_cfg.adam_eps,
        );
        let trainable = store.trainable_names();
        Ok(Trainer {
            store,
            model_cfg,
            train_cfg,
            adam,
            trainable,
        })
    }

    pub fn store(&self) -> &ParameterStore<F> {
        self.store
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_cfg
    }

    /// One optimizer step over a batch. FROZEN tensors are untouched;
    /// a non-finite loss aborts with a diagnostic.
    pub fn step(&mut self, batch: &MaskedBatch) -> Result<StepRecord> {
        let started = Instant::now();
        let step_no = self.adam.step_count() + 1;

        let mut fwd = Forward::for_training(self.store, self.model_cfg);
        if self.model_cfg.dropout > 0.0 {
            let rng = seeded_rng(self.train_cfg.seed, &format!("dropout-{step_no}"));
            fwd = fwd.with_dropout_rng(rng);
        }
        let (loss_node, parts) = match self.train_cfg.mode {
            TrainMode::PretrainMlm => mlm_loss(&mut fwd, batch, self.model_cfg.n_enc_layers)?,
            _ => finetune_loss(&mut fwd, batch, self.train_cfg.length_loss_weight)?,
        };
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!(
                "training aborted: non-finite loss {} at step {step_no}",
                parts.total
            )));
        }
        fwd.graph.backward(loss_node)?;

        // Collect gradients before releasing the immutable borrow.
        let grads: Vec<(String, crate::numerics::Tensor<F>)> = self
            .trainable
            .iter()
            .map(|name| {
                let g = match fwd.param_node(name) {
                    Some(id) => fwd.graph.grad_or_zeros(id),
                    None => crate::numerics::Tensor::zeros(
                        self.store.get(name).expect("trainable name").shape(),
                    ),
                };
                (name.clone(), g)
            })
            .collect();
        drop(fwd);

        self.adam.begin_step();
        for (name, grad) in &grads {
            self.adam.update(name, self.store.get_mut(name)?, grad)?;
        }

        Ok(StepRecord {
            step: self.adam.step_count(),
            mode: self.train_cfg.mode,
            loss: parts.total,
            word_loss: parts.word,
            length_loss: parts.length,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
        })
    }
}

/// Data a training run consumes.
pub enum TrainData {
    /// Monolingual id sequences (MLM pre-training).
    Mlm(Vec<Vec<u32>>),
    /// Parallel id pairs (fine-tuning).
    Cmlm(Vec<(Vec<u32>, Vec<u32>)>),
}

/// Run `epochs` over the data with per-epoch deterministic shuffling
/// keyed by (seed, epoch). Returns the mean total loss of each epoch,
/// writing one metrics line per step into `metrics` when given.
pub fn run_epochs<F: Scalar>(
    store: &mut ParameterStore<F>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &TrainData,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    let n = match data {
        TrainData::Mlm(seqs) => seqs.len(),
        TrainData::Cmlm(pairs) => pairs.len(),
    };
    if n == 0 {
        return Err(Error::Data("no training data".into()));
    }
    let mut trainer = Trainer::new(store, model_cfg, train_cfg.clone())?;
    if let Some(m) = metrics.as_deref_mut() {
        writeln!(m, "{METRICS_HEADER}")?;
    }
    let mut epoch_means = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = seeded_rng(train_cfg.seed, &format!("shuffle-{epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut mask_rng = seeded_rng(train_cfg.seed, &format!("mask-{epoch}"));

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch = match data {
                TrainData::Mlm(seqs) => {
                    let picked: Vec<Vec<u32>> =
                        chunk.iter().map(|&i| seqs[i].clone()).collect();
                    sample_mlm_batch(&picked, train_cfg.mlm_mask_fraction, &mut mask_rng)?
                }
                TrainData::Cmlm(pairs) => {
                    let picked: Vec<(Vec<u32>, Vec<u32>)> =
                        chunk.iter().map(|&i| pairs[i].clone()).collect();
                    if autoregressive(model_cfg) {
                        super::ar_batch(&picked)?
                    } else {
                        sample_cmlm_batch(&picked, &mut mask_rng)?
                    }
                }
            };
            let record = trainer.step(&batch)?;
            epoch_loss += record.loss;
            steps += 1;
            if let Some(m) = metrics.as_deref_mut() {
                writeln!(m, "{}", record.tsv_line())?;
            }
        }
        epoch_means.push(epoch_loss / steps as f64);
    }
    Ok(epoch_means)
}

fn autoregressive(model_cfg: &ModelConfig) -> bool {
    model_cfg.decoder_kind == crate::model::DecoderKind::TransformerAr
        || model_cfg.decoder_mask == crate::model::MaskMode::Causal
}

/// MLM pre-training of one backbone from scratch. The returned store
/// carries side-neutral names (`embed.*`, `layer.*`) and is the frozen
/// XBERT or YBERT of a later assembly.
pub fn pretrain_backbone<F: Scalar>(
    corpus: &[Vec<u32>],
    model_cfg: &ModelConfig,
    side: Side,
    train_cfg: &TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<ParameterStore<F>> {
    let tag = match side {
        Side::Source => "pretrain-xbert",
        Side::Target => "pretrain-ybert",
    };
    let mut store = crate::model::init_backbone::<F>(model_cfg, side, tag);
    let mut cfg = train_cfg.clone();
    cfg.mode = TrainMode::PretrainMlm;
    // The stack depth of this side.
    let mut side_cfg = model_cfg.clone();
    side_cfg.n_enc_layers = model_cfg.layers_for(side);
    let data = TrainData::Mlm(corpus.to_vec());
    run_epochs(&mut store, &side_cfg, &cfg, &data, metrics)?;
    Ok(store)
}

/// Held-out MLM quality: (mean loss, masked-token accuracy) under a
/// deterministic masking stream.
pub fn mlm_eval<F: Scalar>(
    store: &ParameterStore<F>,
    model_cfg: &ModelConfig,
    side: Side,
    sequences: &[Vec<u32>],
    fraction: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let layers = model_cfg.layers_for(side);
    let mut rng = seeded_rng(seed, "mlm-eval");
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in sequences {
        let batch = sample_mlm_batch(std::slice::from_ref(seq), fraction, &mut rng)?;
        let item = &batch.items[0];
        let mut fwd = Forward::new(store, model_cfg);
        let logits = fwd.backbone_forward(&item.input, layers)?;
        let targets: Vec<usize> = item.original.iter().map(|&t| t as usize).collect();
        let ignore: Vec<bool> = item.masked.iter().map(|&m| !m).collect();
        let ce = fwd.graph.cross_entropy(logits, &targets, &ignore)?;
        total_loss += fwd.graph.value(ce).item().to_f64();
        let lv = fwd.graph.value(logits);
        for (pos, &m) in item.masked.iter().enumerate() {
            if !m {
                continue;
            }
            let row = lv.row(pos);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("non-empty vocab");
            if argmax == targets[pos] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok((
        total_loss / sequences.len() as f64,
        correct as f64 / total as f64,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble, init_backbone, DecoderKind};

    fn tiny_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(12, 12);
        cfg.d_hidden = 8;
        cfg.n_heads = 2;
        cfg.n_enc_layers = 2;
        cfg.n_dec_layers = 2;
        cfg.d_ffn = 16;
        cfg.d_adapter_enc = 4;
        cfg.d_adapter_ffn = 16;
        cfg.enc_adapter_layers = vec![1, 2];
        cfg.dec_adapter_layers = vec![1, 2];
        cfg.max_src_len = 10;
        cfg.max_tgt_len = 8;
        cfg
    }

    fn assembled(cfg: &ModelConfig) -> ParameterStore<f64> {
        let x = init_backbone::<f64>(cfg, Side::Source, "x");
        let y = init_backbone::<f64>(cfg, Side::Target, "y");
        assemble(&x, &y, cfg).unwrap()
    }

    fn toy_pairs() -> Vec<(Vec<u32>, Vec<u32>)> {
        vec![
            (vec![6, 7, 8], vec![8, 7, 6]),
            (vec![9, 10], vec![10, 9]),
            (vec![7, 9, 11, 6], vec![6, 11, 9, 7]),
        ]
    }

    #[test]
    fn lambda_zero_total_equals_word_loss() {
        let cfg = tiny_config();
        let store = assembled(&cfg);
        let mut rng = seeded_rng(3, "b");
        let batch = sample_cmlm_batch(&toy_pairs(), &mut rng).unwrap();
        let mut fwd = Forward::for_training(&store, &cfg);
        let (_, parts) = super::finetune_loss(&mut fwd, &batch, 0.0).unwrap();
        assert_eq!(parts.total, parts.word);
    }

    #[test]
    fn length_loss_is_nonnegative_addition() {
        let cfg = tiny_config();
        let store = assembled(&cfg);
        let mut rng = seeded_rng(4, "b");
        let batch = sample_cmlm_batch(&toy_pairs(), &mut rng).unwrap();
        let run = |lambda: f64| {
            let mut fwd = Forward::for_training(&store, &cfg);
            super::finetune_loss(&mut fwd, &batch, lambda).unwrap().1
        };
        let with = run(1.0);
        let without = run(0.0);
        assert!(with.total >= without.total);
        assert!((with.word - without.word).abs() < 1e-12);
    }

    #[test]
    fn all_masked_target_scratch_backbone_loss_near_ln_v() {
        let cfg = tiny_config();
        let store = assembled(&cfg);
        // Mask every target position by drawing until m = |y| (forced
        // here by a length-1 and fully-masked construction).
        let pairs = vec![(vec![6u32, 7], vec![8u32, 9, 10])];
        let batch = MaskedBatch {
            items: vec![super::super::MaskedItem {
                input: vec![crate::tokenizer::MASK; 3],
                original: vec![8, 9, 10],
                masked: vec![true; 3],
                src: Some(vec![crate::tokenizer::LENGTH, 6, 7]),
            }],
        };
        let _ = pairs;
        let mut fwd = Forward::for_training(&store, &cfg);
        let (_, parts) = super::finetune_loss(&mut fwd, &batch, 0.0).unwrap();
        let ln_v = (cfg.tgt_vocab as f64).ln();
        assert!(
            (parts.word - ln_v).abs() / ln_v < 0.2,
            "word loss {} vs ln V {}",
            parts.word,
            ln_v
        );
    }

    #[test]
    fn frozen_tensors_bit_identical_and_adapters_move() {
        let cfg = tiny_config();
        let mut store = assembled(&cfg);
        let before: Vec<(String, Vec<u64>)> = store
            .iter()
            .map(|(n, t, _)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let train_cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&mut store, &cfg, train_cfg).unwrap();
        let mut rng = seeded_rng(5, "b");
        let mut adapter_changed = false;
        for _ in 0..5 {
            let batch = sample_cmlm_batch(&toy_pairs(), &mut rng).unwrap();
            trainer.step(&batch).unwrap();
        }
        for (name, old_bits) in &before {
            let now = trainer.store().get(name).unwrap();
            let same = now
                .data()
                .iter()
                .zip(old_bits.iter())
                .all(|(v, &b)| v.to_bits() == b);
            match trainer.store().partition(name).unwrap() {
                Partition::Frozen => assert!(same, "frozen tensor {name} changed"),
                Partition::Trainable => {
                    if !same && name.contains(".adapter.") {
                        adapter_changed = true;
                    }
                }
            }
        }
        assert!(adapter_changed, "no adapter tensor moved after 5 steps");
    }

    #[test]
    fn identical_seeds_reproduce_bit_identical_parameters() {
        let cfg = tiny_config();
        let run = || {
            let mut store = assembled(&cfg);
            let train_cfg = TrainConfig {
                epochs: 10,
                batch_size: 2,
                seed: 77,
                ..TrainConfig::default()
            };
            let data = TrainData::Cmlm(toy_pairs());
            run_epochs(&mut store, &cfg, &train_cfg, &data, None).unwrap();
            store
        };
        let a = run();
        let b = run();
        for (name, ta, _) in a.iter() {
            let tb = b.get(name).unwrap();
            assert_eq!(
                ta.data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
                tb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "parameter {name} diverged between identical runs"
            );
        }
    }

    #[test]
    fn fixed_batch_overfit_loss_decreases() {
        let cfg = tiny_config();
        let mut store = assembled(&cfg);
        let train_cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&mut store, &cfg, train_cfg).unwrap();
        let mut rng = seeded_rng(6, "overfit");
        let pairs = vec![
            (vec![6u32, 7, 8], vec![8u32, 7, 6]),
            (vec![9u32, 10], vec![10u32, 9]),
        ];
        let batch = sample_cmlm_batch(&pairs, &mut rng).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(trainer.step(&batch).unwrap().loss);
        }
        let first = losses[0];
        let last = *losses.last().unwrap();
        assert!(
            last < first * 0.5,
            "no overfitting progress: {first} → {last}"
        );
        for (i, w) in losses.windows(2).enumerate() {
            assert!(w[1] < w[0], "loss rose at step {}: {} → {}", i + 1, w[0], w[1]);
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostic() {
        let cfg = tiny_config();
        let mut store = assembled(&cfg);
        // Poison one adapter weight so the forward pass explodes.
        store
            .get_mut("enc.1.adapter.w1")
            .unwrap()
            .data_mut()[0] = f64::INFINITY;
        let train_cfg = TrainConfig::default();
        let mut trainer = Trainer::new(&mut store, &cfg, train_cfg).unwrap();
        let mut rng = seeded_rng(7, "nan");
        let batch = sample_cmlm_batch(&toy_pairs(), &mut rng).unwrap();
        assert!(matches!(trainer.step(&batch), Err(Error::Numeric(_))));
    }

    #[test]
    fn ar_mode_trains_decoder_from_scratch() {
        let mut cfg = tiny_config();
        cfg.decoder_kind = DecoderKind::TransformerAr;
        let mut store = assembled(&cfg);
        let before = store.get("dec.1.self_attn.wq").unwrap().clone();
        let train_cfg = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(&mut store, &cfg, train_cfg).unwrap();
        let batch = super::super::ar_batch(&toy_pairs()).unwrap();
        trainer.step(&batch).unwrap();
        let after = trainer.store().get("dec.1.self_attn.wq").unwrap();
        assert_ne!(before.data(), after.data());
        // Encoder backbone stays frozen.
        assert_eq!(
            trainer.store().partition("enc.1.attn.wq").unwrap(),
            Partition::Frozen
        );
        // The unused length head stays frozen in this variant.
        assert_eq!(
            trainer.store().partition("length_head.w").unwrap(),
            Partition::Frozen
        );
    }
}
