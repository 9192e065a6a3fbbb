//! `abnet` — synthetic data, pre-training, adapter fine-tuning, decoding
//! and scoring from the command line.
//!
//! Every subcommand reads an optional line-based `key = value` config
//! file plus `--set key=value` overrides; run `abnet pipeline --config
//! exp.cfg` for the full recipe or the individual subcommands for single
//! stages. Exit status is 0 on success, nonzero with a one-line
//! diagnostic on stderr otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use abnet::decoding::{beam_search_decode, mask_predict_decode};
use abnet::evaluation::{corpus_bleu, parameter_audit, EvalReport};
use abnet::harness::{
    encode_pairs, gen_synthetic, load_checkpoint, load_model_checkpoint, run_pipeline, run_sweep,
    save_checkpoint, write_tsv, ExperimentSpec,
};
use abnet::model::{assemble, DecoderKind, MaskMode, Side};
use abnet::tokenizer::Vocabulary;
use abnet::training::{pretrain_backbone, run_epochs, TrainData, TrainMode};
use abnet::{Error, Result};

#[derive(Parser)]
#[command(name = "abnet", version, about = "Adapter-BERT sequence-to-sequence toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config-file handling.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Line-based `key = value` experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set seed=7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentSpec> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::from_file(path)?,
            None => ExperimentSpec::desk_reversal("runs/experiment"),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set {kv:?} is not of the form key=value"))
            })?;
            spec.set(k.trim(), v.trim())?;
        }
        spec.finalize()?;
        Ok(spec)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset splits (and lexicon) into out_dir.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Build a wordpiece vocabulary from a text file.
    BuildVocab {
        /// Input text, one line per sequence (or a TSV; see --column).
        #[arg(long)]
        corpus: PathBuf,
        /// For TSV corpora: which column to read (src or tgt).
        #[arg(long)]
        column: Option<String>,
        /// Target vocabulary size.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Keep case instead of lowercasing.
        #[arg(long)]
        cased: bool,
        /// Output vocabulary file.
        #[arg(long)]
        out: PathBuf,
    },
    /// MLM-pretrain one backbone on one side of a TSV dataset.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parallel TSV data (source<TAB>target).
        #[arg(long)]
        data: PathBuf,
        /// Which column to pre-train on: src or tgt.
        #[arg(long)]
        side: String,
        /// Vocabulary for that side.
        #[arg(long)]
        vocab: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (TSV, one line per step).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Assemble backbones and fine-tune on parallel data.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        /// Pre-trained source-side backbone checkpoint.
        #[arg(long)]
        xbert: PathBuf,
        /// Pre-trained target-side backbone checkpoint (omit for the
        /// transformer-ar decoder or train-scratch mode).
        #[arg(long)]
        ybert: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Decode source lines with a fine-tuned checkpoint.
    Decode {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        src_vocab: PathBuf,
        #[arg(long)]
        tgt_vocab: PathBuf,
        /// Source text, one sentence per line (TSV also accepted; the
        /// first column is used).
        #[arg(long)]
        input: PathBuf,
        /// Decoded text destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// parallel (Mask-Predict) or ar (beam search); default chosen
        /// from the checkpoint's decoder kind.
        #[arg(long)]
        mode: Option<String>,
        /// Mask-Predict iteration bound T.
        #[arg(long, value_name = "N")]
        t: Option<usize>,
        /// Length-beam size B.
        #[arg(long, value_name = "N")]
        b: Option<usize>,
        /// Beam width for ar mode.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypotheses against references (corpus BLEU + exact match).
    Score {
        /// Hypothesis text, one line per sentence.
        #[arg(long)]
        hyp: PathBuf,
        /// Reference text, one line per sentence.
        #[arg(long = "ref", value_name = "REF")]
        reference: PathBuf,
    },
    /// Print the parameter partition of a checkpoint.
    Audit {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the whole recipe: data → vocabularies → pre-training →
    /// fine-tuning → decoding → report.
    Pipeline {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pipeline once per encoder-adapter width; tabulates trainable
    /// parameters and BLEU.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated d_Aenc values.
        #[arg(long, default_value = "8,16,32,64")]
        widths: String,
    },
}

fn read_lines_or_tsv_column(path: &PathBuf, column: Option<&str>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let col = match column {
        Some("src") | None => 0,
        Some("tgt") => 1,
        Some(other) => {
            return Err(Error::Config(format!(
                "column must be src or tgt, got {other:?}"
            )))
        }
    };
    Ok(text
        .lines()
        .map(|l| match l.split_once('\t') {
            Some((s, t)) => {
                if col == 0 {
                    s.to_string()
                } else {
                    t.to_string()
                }
            }
            None => l.to_string(),
        })
        .collect())
}

fn side_of(s: &str) -> Result<Side> {
    match s {
        "src" | "source" => Ok(Side::Source),
        "tgt" | "target" => Ok(Side::Target),
        other => Err(Error::Config(format!("side must be src or tgt, got {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            let spec = config.load()?;
            let data = gen_synthetic(&spec)?;
            std::fs::create_dir_all(&spec.out_dir)?;
            write_tsv(&spec.out_dir.join("train.tsv"), &data.train)?;
            write_tsv(&spec.out_dir.join("valid.tsv"), &data.valid)?;
            write_tsv(&spec.out_dir.join("test.tsv"), &data.test)?;
            if let Some(lex) = &data.lexicon {
                lex.save(&spec.out_dir.join("lexicon.tsv"))?;
            }
            println!(
                "wrote {} train / {} valid / {} test pairs to {}",
                data.train.len(),
                data.valid.len(),
                data.test.len(),
                spec.out_dir.display()
            );
        }
        Command::BuildVocab {
            corpus,
            column,
            size,
            cased,
            out,
        } => {
            let lines = read_lines_or_tsv_column(&corpus, column.as_deref())?;
            let vocab = Vocabulary::build(&lines, size, !cased)?;
            vocab.save(&out)?;
            println!("wrote {} tokens to {}", vocab.len(), out.display());
        }
        Command::Pretrain {
            config,
            data,
            side,
            vocab,
            out,
            metrics,
        } => {
            let spec = config.load()?;
            let side = side_of(&side)?;
            let vocab = Vocabulary::load(&vocab)?;
            let pairs = abnet::harness::read_tsv(&data)?;
            let corpus: Vec<Vec<u32>> = pairs
                .iter()
                .map(|(s, t)| {
                    vocab.encode(match side {
                        Side::Source => s,
                        Side::Target => t,
                    })
                })
                .collect();
            let mut model = spec.model.clone();
            match side {
                Side::Source => model.src_vocab = vocab.len(),
                Side::Target => model.tgt_vocab = vocab.len(),
            }
            // The unused side still needs a valid size for validation.
            model.src_vocab = model.src_vocab.max(vocab.len());
            model.tgt_vocab = model.tgt_vocab.max(vocab.len());
            let train_cfg = abnet::training::TrainConfig {
                mode: TrainMode::PretrainMlm,
                epochs: spec.pretrain_epochs,
                seed: spec.seed,
                batch_size: spec.train.batch_size,
                lr: spec.train.lr,
                mlm_mask_fraction: spec.train.mlm_mask_fraction,
                ..Default::default()
            };
            let mut metrics_file = match &metrics {
                Some(p) => Some(std::fs::File::create(p)?),
                None => None,
            };
            let store = pretrain_backbone::<f32>(
                &corpus,
                &model,
                side,
                &train_cfg,
                metrics_file.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            save_checkpoint(&store, &model.to_config_text(), &out)?;
            println!("wrote backbone checkpoint {}", out.display());
        }
        Command::Finetune {
            config,
            data,
            src_vocab,
            tgt_vocab,
            xbert,
            ybert,
            out,
            metrics,
        } => {
            let spec = config.load()?;
            let sv = Vocabulary::load(&src_vocab)?;
            let tv = Vocabulary::load(&tgt_vocab)?;
            let pairs = abnet::harness::read_tsv(&data)?;
            let encoded = encode_pairs(&pairs, &sv, &tv);
            let mut model = spec.model.clone();
            model.src_vocab = sv.len();
            model.tgt_vocab = tv.len();
            model.validate()?;
            let (xstore, _) = load_checkpoint(&xbert)?;
            let ystore = match &ybert {
                Some(p) => load_checkpoint(p)?.0,
                None => abnet::model::init_backbone(&model, Side::Target, "pretrain-ybert"),
            };
            if model.decoder_kind == DecoderKind::AdapterBert
                && ybert.is_none()
                && spec.train.mode != TrainMode::TrainScratch
            {
                return Err(Error::Config(
                    "adapter-bert fine-tuning needs --ybert (or mode = train-scratch)".into(),
                ));
            }
            let mut store = assemble(&xstore, &ystore, &model)?;
            let mut metrics_file = match &metrics {
                Some(p) => Some(std::fs::File::create(p)?),
                None => None,
            };
            let losses = run_epochs(
                &mut store,
                &model,
                &spec.train,
                &TrainData::Cmlm(encoded),
                metrics_file.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            save_checkpoint(&store, &model.to_config_text(), &out)?;
            println!(
                "fine-tuned {} epochs (final mean loss {:.4}); wrote {}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Decode {
            config,
            ckpt,
            src_vocab,
            tgt_vocab,
            input,
            output,
            mode,
            t,
            b,
            beam,
        } => {
            let spec = config.load()?;
            let (store, model) = load_model_checkpoint(&ckpt)?;
            let sv = Vocabulary::load(&src_vocab)?;
            let tv = Vocabulary::load(&tgt_vocab)?;
            let mut decode_cfg = spec.decode;
            if let Some(t) = t {
                decode_cfg.max_iterations = t;
            }
            if let Some(b) = b {
                decode_cfg.length_beam = b;
            }
            if let Some(w) = beam {
                decode_cfg.beam_width = w;
            }
            let parallel = match mode.as_deref() {
                Some("parallel") => true,
                Some("ar") => false,
                Some(other) => {
                    return Err(Error::Config(format!(
                        "decode mode must be parallel or ar, got {other:?}"
                    )))
                }
                None => {
                    model.decoder_kind == DecoderKind::AdapterBert
                        && model.decoder_mask == MaskMode::Bidirectional
                }
            };
            let lines = read_lines_or_tsv_column(&input, Some("src"))?;
            let mut rendered = String::new();
            for line in &lines {
                let ids = sv.encode(line);
                let out = if parallel {
                    mask_predict_decode(&store, &model, &decode_cfg, &ids)?
                } else {
                    beam_search_decode(&store, &model, decode_cfg.beam_width, &ids)?
                };
                rendered.push_str(&tv.decode(&out.tokens)?);
                rendered.push('\n');
            }
            match output {
                Some(path) => std::fs::write(path, rendered)?,
                None => print!("{rendered}"),
            }
        }
        Command::Score { hyp, reference } => {
            let hyps: Vec<Vec<String>> = std::fs::read_to_string(&hyp)?
                .lines()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect();
            let refs: Vec<Vec<String>> = std::fs::read_to_string(&reference)?
                .lines()
                .map(|l| l.split_whitespace().map(str::to_string).collect())
                .collect();
            let report = corpus_bleu(&hyps, &refs)?;
            println!("{}", EvalReport::TSV_HEADER);
            println!("{}", report.tsv_line());
            println!();
            print!("{}", report.render());
        }
        Command::Audit { ckpt } => {
            let (store, _) = load_checkpoint(&ckpt)?;
            let audit = parameter_audit(&store);
            print!("{}", audit.render());
        }
        Command::Pipeline { config } => {
            let spec = config.load()?;
            let artifacts = run_pipeline(&spec)?;
            println!("pipeline complete; artifacts in {}", spec.out_dir.display());
            println!();
            print!("{}", artifacts.report.render());
        }
        Command::Sweep { config, widths } => {
            let spec = config.load()?;
            let widths: Vec<usize> = widths
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("invalid sweep width {w:?}")))
                })
                .collect::<Result<_>>()?;
            let rows = run_sweep(&spec, &widths)?;
            println!("d_aenc\ttrainable-params\tbleu\texact-match");
            for row in rows {
                println!(
                    "{}\t{}\t{:.2}\t{:.4}",
                    row.d_adapter_enc, row.trainable_params, row.bleu, row.exact_match
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
