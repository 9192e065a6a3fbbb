use std::path::{Path, PathBuf};

use crate::decoding::DecodeConfig;
use crate::model::ModelConfig;
use crate::training::{TrainConfig, TrainMode};
use crate::{Error, Result};

/// Synthetic sequence-to-sequence tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// target = source
    Copy,
    /// target = reversed source
    Reverse,
    /// target = bijective symbol lexicon applied after seeded local
    /// reordering of adjacent pairs
    LexiconTranslate,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::LexiconTranslate => "lexicon-translate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "lexicon-translate" => Ok(Task::LexiconTranslate),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Adapter placement shorthand, resolved against the layer count once the
/// whole config is known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    All,
    TopHalf,
    None,
    Layers(Vec<usize>),
}

impl Placement {
    pub fn resolve(&self, layers: usize) -> Vec<usize> {
        match self {
            Placement::All => (1..=layers).collect(),
            Placement::TopHalf => (layers / 2 + 1..=layers).collect(),
            Placement::None => vec![],
            Placement::Layers(v) => v.clone(),
        }
    }

    fn parse(value: &str) -> Result<Self> {
        match value {
            "all" => Ok(Placement::All),
            "top-half" => Ok(Placement::TopHalf),
            "none" | "" => Ok(Placement::None),
            list => {
                let layers = list
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<usize>().map_err(|_| {
                            Error::Config(format!("invalid adapter layer index {s:?}"))
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?;
                Ok(Placement::Layers(layers))
            }
        }
    }
}

/// Everything one experiment needs: task and data sizes, the model,
/// training and decoding configurations, and the output directory.
#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub task: Task,
    /// Number of distinct ordinary symbols in the synthetic alphabet.
    pub vocab_symbols: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    /// Wordpiece vocabulary target size per side.
    pub vocab_size: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub decode: DecodeConfig,
    pub enc_adapters: Placement,
    pub dec_adapters: Placement,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentSpec {
    /// The desk reversal task: 24 symbols, lengths 3–12, 8k training
    /// pairs, desk-default model, 5 pre-training and 30 fine-tuning
    /// epochs, Mask-Predict T=10 / B=4 and beam width 5.
    pub fn desk_reversal(out_dir: impl Into<PathBuf>) -> Self {
        ExperimentSpec {
            task: Task::Reverse,
            vocab_symbols: 24,
            min_len: 3,
            max_len: 12,
            train_pairs: 8000,
            valid_pairs: 500,
            test_pairs: 500,
            vocab_size: 64,
            model: ModelConfig::desk_default(0, 0),
            train: TrainConfig {
                mode: TrainMode::FinetuneAdapters,
                epochs: 30,
                ..TrainConfig::default()
            },
            pretrain_epochs: 5,
            decode: DecodeConfig::default(),
            enc_adapters: Placement::TopHalf,
            dec_adapters: Placement::TopHalf,
            out_dir: out_dir.into(),
            seed: 1,
        }
    }

    /// Resolve derived fields (seeds, adapter placements) and validate.
    /// Vocabulary sizes on the model are filled in later, once the
    /// vocabularies are built.
    pub fn finalize(&mut self) -> Result<()> {
        if self.vocab_symbols < 2 {
            return Err(Error::Config("need at least two symbols".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.max_len > self.model.max_tgt_len {
            return Err(Error::Config(format!(
                "length range up to {} exceeds max_tgt_len {}",
                self.max_len, self.model.max_tgt_len
            )));
        }
        if self.max_len + 1 > self.model.max_src_len {
            return Err(Error::Config(format!(
                "length range up to {} plus the [LENGTH] prefix exceeds max_src_len {}",
                self.max_len, self.model.max_src_len
            )));
        }
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.model.enc_adapter_layers = self.enc_adapters.resolve(self.model.n_enc_layers);
        self.model.dec_adapter_layers = self.dec_adapters.resolve(self.model.n_dec_layers);
        self.train.validate()?;
        self.decode.validate()?;
        Ok(())
    }

    /// Read a line-based `key = value` file; later lines override earlier
    /// ones. Unknown keys are configuration errors naming the key.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let mut spec = ExperimentSpec::desk_reversal("runs/experiment");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            spec.set(key.trim(), value.trim())?;
        }
        Ok(spec)
    }

    /// Apply one `key = value` pair (config file line or CLI override).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("key {key}: invalid number {v:?}")))
        };
        let parse_f64 = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("key {key}: invalid number {v:?}")))
        };
        match key {
            "task" => self.task = Task::parse(value)?,
            "vocab_symbols" => self.vocab_symbols = parse_usize(value)?,
            "min_len" => self.min_len = parse_usize(value)?,
            "max_len" => self.max_len = parse_usize(value)?,
            "train_pairs" => self.train_pairs = parse_usize(value)?,
            "valid_pairs" => self.valid_pairs = parse_usize(value)?,
            "test_pairs" => self.test_pairs = parse_usize(value)?,
            "vocab_size" => self.vocab_size = parse_usize(value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_usize(value)?,
            "finetune_epochs" => self.train.epochs = parse_usize(value)?,
            "batch_size" => self.train.batch_size = parse_usize(value)?,
            "lr" => self.train.lr = parse_f64(value)?,
            "mode" => self.train.mode = TrainMode::parse(value)?,
            "mlm_fraction" => self.train.mlm_mask_fraction = parse_f64(value)?,
            "lambda_length" => self.train.length_loss_weight = parse_f64(value)?,
            "T" | "max_iterations" => self.decode.max_iterations = parse_usize(value)?,
            "B" | "length_beam" => self.decode.length_beam = parse_usize(value)?,
            "beam" | "beam_width" => self.decode.beam_width = parse_usize(value)?,
            "enc_adapter_layers" => self.enc_adapters = Placement::parse(value)?,
            "dec_adapter_layers" => self.dec_adapters = Placement::parse(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("key seed: invalid number {value:?}")))?
            }
            // Remaining architecture keys belong to the model config.
            other => self.model.set(other, value)?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_reversal_finalizes() {
        let mut spec = ExperimentSpec::desk_reversal("/tmp/x");
        spec.finalize().unwrap();
        assert_eq!(spec.model.enc_adapter_layers, vec![3, 4]);
        assert_eq!(spec.model.dec_adapter_layers, vec![3, 4]);
        assert_eq!(spec.decode.max_iterations, 10);
        assert_eq!(spec.decode.length_beam, 4);
        assert_eq!(spec.decode.beam_width, 5);
    }

    #[test]
    fn unknown_key_names_itself() {
        let mut spec = ExperimentSpec::desk_reversal("/tmp/x");
        let err = spec.set("nonsense_key", "1").unwrap_err();
        assert!(err.to_string().contains("nonsense_key"), "{err}");
    }

    #[test]
    fn placement_shorthands() {
        assert_eq!(Placement::All.resolve(4), vec![1, 2, 3, 4]);
        assert_eq!(Placement::TopHalf.resolve(4), vec![3, 4]);
        assert_eq!(Placement::TopHalf.resolve(12), vec![7, 8, 9, 10, 11, 12]);
        assert_eq!(Placement::None.resolve(4), Vec::<usize>::new());
        assert_eq!(Placement::parse("1,3").unwrap(), Placement::Layers(vec![1, 3]));
    }

    #[test]
    fn config_file_roundtrip_with_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.cfg");
        std::fs::write(
            &path,
            "# reversal experiment\ntask = reverse\nvocab_symbols = 10\nmin_len = 2\n\
             max_len = 6\nT = 5\nB = 2\nd_hidden = 32\nn_heads = 2\nseed = 9\n",
        )
        .unwrap();
        let mut spec = ExperimentSpec::from_file(&path).unwrap();
        spec.finalize().unwrap();
        assert_eq!(spec.vocab_symbols, 10);
        assert_eq!(spec.decode.max_iterations, 5);
        assert_eq!(spec.model.d_hidden, 32);
        assert_eq!(spec.model.seed, 9);
    }

    #[test]
    fn length_range_must_fit_model() {
        let mut spec = ExperimentSpec::desk_reversal("/tmp/x");
        spec.max_len = 99;
        assert!(matches!(spec.finalize(), Err(Error::Config(_))));
    }
}
