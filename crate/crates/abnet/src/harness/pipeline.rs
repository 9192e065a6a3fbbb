use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use super::{gen_synthetic, save_checkpoint, write_tsv, ExperimentSpec, SyntheticData};
use crate::decoding::{beam_search_decode, mask_predict_decode, DecodeConfig};
use crate::evaluation::{corpus_bleu, measure_latency, parameter_audit, EvalReport, TimedDecode};
use crate::model::{
    assemble, init_backbone, DecoderKind, MaskMode, ModelConfig, ParameterStore, Side,
};
use crate::tokenizer::Vocabulary;
use crate::training::{pretrain_backbone, run_epochs, TrainData, TrainMode};
use crate::{Error, Result};

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::State(format!("stage {name} failed: {e}")))
}

/// Token-id views of the three splits.
#[derive(Clone, Debug)]
pub struct EncodedData {
    pub train: Vec<(Vec<u32>, Vec<u32>)>,
    pub valid: Vec<(Vec<u32>, Vec<u32>)>,
    pub test: Vec<(Vec<u32>, Vec<u32>)>,
}

/// Generated data plus the vocabularies built from its training split.
pub struct PreparedData {
    pub raw: SyntheticData,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub encoded: EncodedData,
}

pub fn encode_pairs(
    pairs: &[(String, String)],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Vec<(Vec<u32>, Vec<u32>)> {
    pairs
        .iter()
        .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
        .collect()
}

/// Generate data and build both vocabularies; returns the prepared data
/// and the model config with its vocabulary sizes filled in.
pub fn prepare(spec: &ExperimentSpec) -> Result<(PreparedData, ModelConfig)> {
    let raw = gen_synthetic(spec)?;
    let train_sources: Vec<&str> = raw.train.iter().map(|(s, _)| s.as_str()).collect();
    let train_targets: Vec<&str> = raw.train.iter().map(|(_, t)| t.as_str()).collect();
    // Separate vocabularies per side, mirroring the two distinct
    // backbones, even when the alphabets coincide.
    let src_vocab = Vocabulary::build(&train_sources, spec.vocab_size, true)?;
    let tgt_vocab = Vocabulary::build(&train_targets, spec.vocab_size, true)?;
    let mut model = spec.model.clone();
    model.src_vocab = src_vocab.len();
    model.tgt_vocab = tgt_vocab.len();
    model.validate()?;
    let encoded = EncodedData {
        train: encode_pairs(&raw.train, &src_vocab, &tgt_vocab),
        valid: encode_pairs(&raw.valid, &src_vocab, &tgt_vocab),
        test: encode_pairs(&raw.test, &src_vocab, &tgt_vocab),
    };
    Ok((
        PreparedData {
            raw,
            src_vocab,
            tgt_vocab,
            encoded,
        },
        model,
    ))
}

/// Decode the test split and fill an [`EvalReport`]: BLEU and exact match
/// over token ids, per-sentence latency at batch size 1, and the decoder
/// call accounting. Returns the report and the decoded hypotheses.
pub fn decode_and_eval(
    store: &ParameterStore<f32>,
    model: &ModelConfig,
    decode: &DecodeConfig,
    test: &[(Vec<u32>, Vec<u32>)],
) -> Result<(EvalReport, Vec<Vec<u32>>)> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let parallel = model.decoder_kind == DecoderKind::AdapterBert
        && model.decoder_mask == MaskMode::Bidirectional;
    let (latency_ms, mean_iterations, mean_calls, hypotheses) = measure_latency(
        |i| -> Result<TimedDecode> {
            let out = if parallel {
                mask_predict_decode(store, model, decode, &test[i].0)?
            } else {
                beam_search_decode(store, model, decode.beam_width, &test[i].0)?
            };
            Ok(TimedDecode {
                tokens: out.tokens,
                iterations: out.iterations_used,
                decoder_calls: out.decoder_calls,
            })
        },
        test.len(),
    )?;
    let references: Vec<Vec<u32>> = test.iter().map(|(_, t)| t.clone()).collect();
    let mut report = corpus_bleu(&hypotheses, &references)?;
    report.latency_ms = latency_ms;
    report.mean_iterations = mean_iterations;
    report.mean_decoder_calls = mean_calls;
    let audit = parameter_audit(store);
    report.trainable_params = audit.trainable;
    report.total_params = audit.total();
    Ok((report, hypotheses))
}

/// Everything a pipeline run leaves behind.
#[derive(Debug)]
pub struct PipelineArtifacts {
    pub report: EvalReport,
    pub finetune_epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub hypotheses: Vec<Vec<u32>>,
}

/// The full recipe: generate data, build vocabularies, pre-train the
/// backbones, assemble, fine-tune, decode the test set, and write every
/// artifact (datasets, vocabularies, checkpoints, metrics logs, report)
/// into the spec's output directory.
pub fn run_pipeline(spec: &ExperimentSpec) -> Result<PipelineArtifacts> {
    let mut spec = spec.clone();
    stage("config", spec.finalize())?;
    let out = &spec.out_dir;
    std::fs::create_dir_all(out)?;

    let (prepared, model) = stage("prepare-data", prepare(&spec))?;
    stage("write-data", {
        write_tsv(&out.join("train.tsv"), &prepared.raw.train)
            .and_then(|()| write_tsv(&out.join("valid.tsv"), &prepared.raw.valid))
            .and_then(|()| write_tsv(&out.join("test.tsv"), &prepared.raw.test))
            .and_then(|()| match &prepared.raw.lexicon {
                Some(lex) => lex.save(&out.join("lexicon.tsv")),
                None => Ok(()),
            })
            .and_then(|()| prepared.src_vocab.save(&out.join("vocab.src.txt")))
            .and_then(|()| prepared.tgt_vocab.save(&out.join("vocab.tgt.txt")))
    })?;

    let scratch = spec.train.mode == TrainMode::TrainScratch;
    let pretrain_cfg = crate::training::TrainConfig {
        mode: TrainMode::PretrainMlm,
        epochs: spec.pretrain_epochs,
        seed: spec.seed,
        batch_size: spec.train.batch_size,
        lr: spec.train.lr,
        mlm_mask_fraction: spec.train.mlm_mask_fraction,
        ..Default::default()
    };

    let xbert: ParameterStore<f32> = if scratch {
        init_backbone(&model, Side::Source, "pretrain-xbert")
    } else {
        stage("pretrain-xbert", {
            let sources: Vec<Vec<u32>> = prepared
                .encoded
                .train
                .iter()
                .map(|(s, _)| s.clone())
                .collect();
            let mut metrics = File::create(out.join("metrics.pretrain-src.tsv"))?;
            let store = pretrain_backbone(
                &sources,
                &model,
                Side::Source,
                &pretrain_cfg,
                Some(&mut metrics),
            )?;
            save_checkpoint(&store, &model.to_config_text(), &out.join("xbert.ckpt"))?;
            Ok(store)
        })?
    };

    let needs_ybert = model.decoder_kind == DecoderKind::AdapterBert;
    let ybert: ParameterStore<f32> = if !needs_ybert || scratch {
        init_backbone(&model, Side::Target, "pretrain-ybert")
    } else {
        stage("pretrain-ybert", {
            let targets: Vec<Vec<u32>> = prepared
                .encoded
                .train
                .iter()
                .map(|(_, t)| t.clone())
                .collect();
            let mut metrics = File::create(out.join("metrics.pretrain-tgt.tsv"))?;
            let store = pretrain_backbone(
                &targets,
                &model,
                Side::Target,
                &pretrain_cfg,
                Some(&mut metrics),
            )?;
            save_checkpoint(&store, &model.to_config_text(), &out.join("ybert.ckpt"))?;
            Ok(store)
        })?
    };

    let mut assembled = stage("assemble", assemble(&xbert, &ybert, &model))?;

    let epoch_losses = stage("finetune", {
        let mut metrics = File::create(out.join("metrics.finetune.tsv"))?;
        run_epochs(
            &mut assembled,
            &model,
            &spec.train,
            &TrainData::Cmlm(prepared.encoded.train.clone()),
            Some(&mut metrics),
        )
    })?;
    let checkpoint = out.join("abnet.ckpt");
    stage(
        "save-checkpoint",
        save_checkpoint(&assembled, &model.to_config_text(), &checkpoint),
    )?;

    let (report, hypotheses) = stage(
        "decode-eval",
        decode_and_eval(&assembled, &model, &spec.decode, &prepared.encoded.test),
    )?;
    stage("write-report", {
        let mut f = File::create(out.join("eval.tsv"))?;
        writeln!(f, "{}", EvalReport::TSV_HEADER)?;
        writeln!(f, "{}", report.tsv_line())?;
        std::fs::write(out.join("eval.txt"), report.render())?;
        let mut hyps = File::create(out.join("hyps.txt"))?;
        for h in &hypotheses {
            writeln!(hyps, "{}", prepared.tgt_vocab.decode(h)?)?;
        }
        Ok(())
    })?;

    Ok(PipelineArtifacts {
        report,
        finetune_epoch_losses: epoch_losses,
        checkpoint,
        hypotheses,
    })
}

/// One row of the adapter-width sweep table.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub d_adapter_enc: usize,
    pub trainable_params: usize,
    pub bleu: f64,
    pub exact_match: f64,
}

/// Run the pipeline once per encoder-adapter width and tabulate
/// (d_Aenc, trainable parameters, BLEU). Writes `sweep.tsv` under the
/// base output directory.
pub fn run_sweep(base: &ExperimentSpec, widths: &[usize]) -> Result<Vec<SweepRow>> {
    if widths.is_empty() {
        return Err(Error::Config("sweep needs at least one width".into()));
    }
    let mut rows = Vec::with_capacity(widths.len());
    for &w in widths {
        let mut spec = base.clone();
        spec.model.d_adapter_enc = w;
        spec.out_dir = base.out_dir.join(format!("sweep-daenc-{w}"));
        let artifacts = run_pipeline(&spec)?;
        rows.push(SweepRow {
            d_adapter_enc: w,
            trainable_params: artifacts.report.trainable_params,
            bleu: artifacts.report.bleu,
            exact_match: artifacts.report.exact_match,
        });
    }
    std::fs::create_dir_all(&base.out_dir)?;
    let mut f = File::create(base.out_dir.join("sweep.tsv"))?;
    writeln!(f, "d_aenc\ttrainable-params\tbleu\texact-match")?;
    for row in &rows {
        writeln!(
            f,
            "{}\t{}\t{:.2}\t{:.4}",
            row.d_adapter_enc, row.trainable_params, row.bleu, row.exact_match
        )?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Task;

    /// A pipeline small enough for a unit test: few pairs, one epoch.
    fn micro_spec(dir: &std::path::Path) -> ExperimentSpec {
        let mut spec = ExperimentSpec::desk_reversal(dir);
        spec.task = Task::Copy;
        spec.vocab_symbols = 8;
        spec.min_len = 2;
        spec.max_len = 5;
        spec.train_pairs = 24;
        spec.valid_pairs = 6;
        spec.test_pairs = 6;
        spec.pretrain_epochs = 1;
        spec.train.epochs = 1;
        spec.train.batch_size = 8;
        spec.model.d_hidden = 16;
        spec.model.n_heads = 2;
        spec.model.n_enc_layers = 2;
        spec.model.n_dec_layers = 2;
        spec.model.d_ffn = 32;
        spec.model.d_adapter_enc = 8;
        spec.model.d_adapter_ffn = 32;
        spec.model.max_src_len = 8;
        spec.model.max_tgt_len = 6;
        spec.decode.max_iterations = 2;
        spec.decode.length_beam = 2;
        spec
    }

    #[test]
    fn micro_pipeline_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = micro_spec(dir.path());
        let artifacts = run_pipeline(&spec).unwrap();
        assert_eq!(artifacts.hypotheses.len(), 6);
        assert!(artifacts.report.total_params > 0);
        for file in [
            "train.tsv",
            "valid.tsv",
            "test.tsv",
            "vocab.src.txt",
            "vocab.tgt.txt",
            "xbert.ckpt",
            "ybert.ckpt",
            "abnet.ckpt",
            "metrics.pretrain-src.tsv",
            "metrics.pretrain-tgt.tsv",
            "metrics.finetune.tsv",
            "eval.tsv",
            "eval.txt",
            "hyps.txt",
        ] {
            assert!(dir.path().join(file).exists(), "missing {file}");
        }
    }

    #[test]
    fn pipeline_is_bit_reproducible() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = run_pipeline(&micro_spec(dir_a.path())).unwrap();
        let b = run_pipeline(&micro_spec(dir_b.path())).unwrap();
        assert_eq!(
            std::fs::read(dir_a.path().join("abnet.ckpt")).unwrap(),
            std::fs::read(dir_b.path().join("abnet.ckpt")).unwrap(),
            "checkpoints differ between identical runs"
        );
        assert_eq!(a.report.tsv_line().split('\t').next(), b.report.tsv_line().split('\t').next());
        assert_eq!(a.hypotheses, b.hypotheses);
    }

    #[test]
    fn stage_failures_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = micro_spec(dir.path());
        spec.vocab_size = 3; // below the mandatory coverage
        let err = run_pipeline(&spec).unwrap_err();
        assert!(err.to_string().contains("prepare-data"), "{err}");
    }
}
