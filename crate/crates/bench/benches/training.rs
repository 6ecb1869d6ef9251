use criterion::{criterion_group, criterion_main, Criterion};
use dact_bench::small_corpus;
use dact_core::train::model_for_corpus;
use dact_core::{evaluate, train, Setting, TrainConfig};
use std::hint::black_box;

fn config() -> TrainConfig {
    TrainConfig {
        embed_dim: 32,
        hidden_dim: 32,
        head_dim: 8,
        ff_dim: 32,
        max_tokens: 12,
        epochs: 1,
        ..Default::default()
    }
}

fn one_epoch(c: &mut Criterion) {
    let corpus = small_corpus();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("epoch_8_dialogues", |b| b.iter(|| black_box(train(&corpus, config()).unwrap().1)));
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let corpus = small_corpus();
    let model = model_for_corpus(&corpus, config()).unwrap();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(20);
    group.bench_function("offline", |b| b.iter(|| black_box(evaluate(&model, &corpus.test, Setting::Offline).unwrap())));
    group.bench_function("online", |b| b.iter(|| black_box(evaluate(&model, &corpus.test, Setting::Online).unwrap())));
    group.finish();
}

criterion_group!(benches, one_epoch, evaluation);
criterion_main!(benches);
