use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use mlmass::eval::{corpus_bleu, Smoothing};
use mlmass::model::{backward, forward, RunMode};
use mlmass::subword::train_vocab;
use mlmass::trainer::{train_step, OptimizerState, TrainConfig};
use mlmass_bench::{batch, model_config, suite, ModelParams, Objective};

fn bleu(c: &mut Criterion) {
    let s = suite(1000);
    let test = s.test_set("xa", "en").unwrap();
    let hyps: Vec<&str> = test.pairs.iter().map(|(h, _)| h.as_str()).collect();
    let refs: Vec<&str> = test.pairs.iter().map(|(_, r)| r.as_str()).collect();
    c.bench_function("corpus_bleu_100", |b| {
        b.iter(|| corpus_bleu(black_box(&hyps), black_box(&refs), Smoothing::None).unwrap())
    });
}

fn bpe(c: &mut Criterion) {
    let s = suite(1000);
    let langs = s.config.languages();
    let text: Vec<&str> = s.registry.all_text().collect();
    let mut g = c.benchmark_group("bpe");
    g.sample_size(10);
    g.bench_function("train_1000", |b| {
        b.iter(|| train_vocab(text.iter().copied(), 1000, &langs).unwrap())
    });
    g.bench_function("encode_sentence", |b| b.iter(|| s.vocab.encode(black_box(text[0]))));
    g.finish();
}

fn model(c: &mut Criterion) {
    let s = suite(1000);
    let params = ModelParams::<f32>::init(model_config(&s.vocab, 64), 0).unwrap();
    let tr = batch(&s, Objective::Translation, 32);
    let mut g = c.benchmark_group("model_d64");
    g.sample_size(10);
    g.bench_function("forward", |b| b.iter(|| forward(&params, &tr, RunMode::eval()).unwrap()));
    g.bench_function("backward", |b| b.iter(|| backward(&params, &tr, RunMode::eval(), 1.0).unwrap()));
    g.bench_function("train_step", |b| {
        b.iter_batched(
            || (params.clone(), OptimizerState::new(&params)),
            |(mut p, mut o)| train_step(&mut p, &mut o, &tr, &TrainConfig::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, bleu, bpe, model);
criterion_main!(benches);
