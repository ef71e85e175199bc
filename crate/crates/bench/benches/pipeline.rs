use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use dcht_bench::one_second_pair;
use dcht_core::dsp::{istft, stft, StftConfig};
use dcht_core::hybrid::Trainer;
use dcht_core::{DchtModel, Fusion, ModelConfig};

fn signal(c: &mut Criterion) {
    let pair = one_second_pair(0);
    let cfg = StftConfig::default();
    c.bench_function("stft 1s", |b| b.iter(|| stft(black_box(&pair.noisy), cfg).unwrap()));
    let spec = stft(&pair.noisy, cfg).unwrap();
    c.bench_function("istft 1s", |b| b.iter(|| istft(black_box(&spec), 16000).unwrap()));
}

fn inference(c: &mut Criterion) {
    let pair = one_second_pair(1);
    let (model, store) = DchtModel::new(ModelConfig::default()).unwrap();
    let mut g = c.benchmark_group("enhance 1s, default config");
    g.sample_size(10);
    for (name, fusion) in [("spectral", Fusion::Spectral), ("temporal", Fusion::Temporal), ("both", Fusion::Both)] {
        g.bench_function(name, |b| b.iter(|| model.enhance(&store, black_box(&pair.noisy), fusion).unwrap()));
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let pair = one_second_pair(2);
    let (model, store) = DchtModel::new(ModelConfig::tiny()).unwrap();
    let trainer = Trainer::new(&model, store);
    let mut g = c.benchmark_group("training");
    g.sample_size(10);
    g.bench_function("loss and gradients, tiny config, 1s clip", |b| {
        b.iter(|| trainer.clip_loss(black_box(&pair), true, 0).unwrap())
    });
    g.finish();
}

criterion_group!(benches, signal, inference, training);
criterion_main!(benches);
