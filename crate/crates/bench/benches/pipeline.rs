use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use std::hint::black_box;

use hybridcrop::assignment::{hungarian, train_step, LossWeights};
use hybridcrop::decoder::{forward, ModelConfig, ModelState};
use hybridcrop::experiment::predict_all;
use hybridcrop::metrics::MetricsReport;
use hybridcrop::tensor::AdamW;
use hybridcrop_bench::{cost_matrix, desk_examples};

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    for n in [16, 90] {
        let m = cost_matrix(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| b.iter(|| hungarian(black_box(m))));
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let state = ModelState::init(ModelConfig::desk(), 0).unwrap();
    let ex = &desk_examples(1)[0];
    c.bench_function("forward/desk", |b| {
        b.iter(|| forward(black_box(ex.model_input()), ex.prior.as_ref(), &state).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let batch = desk_examples(4);
    let w = LossWeights::default();
    c.bench_function("train_step/desk_batch4", |b| {
        b.iter_batched(
            || (ModelState::init(ModelConfig::desk(), 0).unwrap(), AdamW::new(1e-4)),
            |(mut state, mut opt)| train_step(&mut state, &batch, &w, &mut opt, 1e-3).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_metrics(c: &mut Criterion) {
    let state = ModelState::init(ModelConfig::desk(), 0).unwrap();
    let preds = predict_all(&state, &desk_examples(50)).unwrap();
    c.bench_function("metrics/standard_50_images", |b| b.iter(|| MetricsReport::standard(black_box(&preds)).unwrap()));
}

criterion_group!(benches, bench_hungarian, bench_forward, bench_train_step, bench_metrics);
criterion_main!(benches);
