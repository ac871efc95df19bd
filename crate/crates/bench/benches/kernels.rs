use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use simclip_core::attacks::{attack, AttackConfig, Objective, ObjectiveContext};
use simclip_core::eval::{cider_score, CiderCorpus};
use simclip_core::finetune::{train_step, TrainConfig, TrainState};
use simclip_core::presets::Benchmark;

fn setup() -> Benchmark {
    let mut bench = Benchmark::builtin().expect("builtin benchmark");
    bench.eval = bench.eval.subset(32, 0);
    bench
}

fn encoder(c: &mut Criterion) {
    let bench = setup();
    let enc = bench.init_encoder(0).unwrap();
    let images = &bench.eval.images;
    let grad = vec![0.1f32; images.len() * enc.embed_dim()];
    c.bench_function("encode_32", |b| b.iter(|| enc.encode(black_box(images), true).unwrap()));
    c.bench_function("input_vjp_32", |b| b.iter(|| enc.input_vjp(black_box(images), &grad, true).unwrap()));
    c.bench_function("param_vjp_32", |b| b.iter(|| enc.param_vjp(black_box(images), &grad, true).unwrap()));
}

fn attacks(c: &mut Criterion) {
    let bench = setup();
    let enc = bench.init_encoder(0).unwrap();
    let slice = bench.eval.subset(8, 1);
    let ctx = ObjectiveContext::new(0.01).with_head(&bench.head).with_labels(&slice.labels);
    let pgd = AttackConfig::pgd(4.0 / 255.0, 10, Objective::CeUntargeted);
    let apgd = AttackConfig::apgd(4.0 / 255.0, 10, Objective::CeUntargeted);
    c.bench_function("pgd_10_steps_8_images", |b| b.iter(|| attack(&enc, black_box(&slice.images), &pgd, &ctx).unwrap()));
    c.bench_function("apgd_10_steps_8_images", |b| b.iter(|| attack(&enc, black_box(&slice.images), &apgd, &ctx).unwrap()));
}

fn training(c: &mut Criterion) {
    let bench = setup();
    let cfg = TrainConfig {
        batch_size: 16,
        total_steps: Some(1_000_000),
        ..TrainConfig::default()
    };
    let batch = bench.train.select(&(0..16).collect::<Vec<_>>());
    let mut state = TrainState::new(bench.init_encoder(0).unwrap(), &cfg, 1_000_000);
    c.bench_function("simclip_step_16", |b| {
        b.iter(|| train_step(&mut state, black_box(&batch.images), Some(&batch.labels), Some(&bench.head), &cfg).unwrap())
    });
}

fn cider(c: &mut Criterion) {
    let words = ["red", "car", "a", "photo", "of", "the", "dog", "small", "blue", "sky"];
    let sentence = |i: usize, len: usize| (0..len).map(|j| words[(i * 7 + j * 3) % words.len()]).collect::<Vec<_>>().join(" ");
    let refs: BTreeMap<String, Vec<String>> = (0..200).map(|i| (format!("img{i}"), (0..4).map(|r| sentence(i + r, 8)).collect())).collect();
    let cands: BTreeMap<String, String> = (0..200).map(|i| (format!("img{i}"), sentence(i * 3, 9))).collect();
    c.bench_function("cider_corpus_200", |b| b.iter(|| CiderCorpus::new(black_box(refs.clone()))));
    let corpus = CiderCorpus::new(refs.clone());
    c.bench_function("cider_score_200", |b| b.iter(|| cider_score(black_box(&cands), &corpus).unwrap()));
}

criterion_group!(benches, encoder, attacks, training, cider);
criterion_main!(benches);
