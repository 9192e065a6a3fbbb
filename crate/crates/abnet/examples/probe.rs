use abnet::harness::*;
use abnet::model::*;
use abnet::training::*;
use abnet::evaluation::*;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let spec0 = ExperimentSpec::desk_reversal("/tmp/probe-full");
    let mut spec = spec0.clone();
    spec.finalize().unwrap();
    let (prepared, model) = prepare(&spec).unwrap();

    let sources: Vec<Vec<u32>> = prepared.encoded.train.iter().map(|(s, _)| s.clone()).collect();
    let targets: Vec<Vec<u32>> = prepared.encoded.train.iter().map(|(_, t)| t.clone()).collect();
    let ptc = TrainConfig { mode: TrainMode::PretrainMlm, epochs: 5, seed: spec.seed, ..Default::default() };
    let x: ParameterStore<f32> = pretrain_backbone(&sources, &model, Side::Source, &ptc, None).unwrap();
    let y: ParameterStore<f32> = pretrain_backbone(&targets, &model, Side::Target, &ptc, None).unwrap();
    let valid_src: Vec<Vec<u32>> = prepared.encoded.valid.iter().map(|(s, _)| s.clone()).collect();
    let (loss, acc) = mlm_eval(&x, &model, Side::Source, &valid_src, 0.15, 99).unwrap();
    println!("[{:.0}s] pretrained. xbert held-out: loss {loss:.3} acc {acc:.3} ({}x uniform)",
             t0.elapsed().as_secs_f64(), (acc * model.src_vocab as f64).round());

    let mut ab = assemble(&x, &y, &model).unwrap();
    let mut tc = spec.train.clone();
    tc.epochs = 5;
    for round in 1..=6 {
        let losses = run_epochs(&mut ab, &model, &tc, &TrainData::Cmlm(prepared.encoded.train.clone()), None).unwrap();
        let (report, _) = decode_and_eval(&ab, &model, &spec.decode, &prepared.encoded.test).unwrap();
        println!("[{:.0}s] epoch {:2}: loss {:.3} EM {:.3} BLEU {:.1}",
                 t0.elapsed().as_secs_f64(), round * 5, losses.last().unwrap(), report.exact_match, report.bleu);
    }
}
