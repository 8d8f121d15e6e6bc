use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use voxelfm_bench::{embedding_pairs, noise_patch, random_store};
use voxelfm_core::embeddings::topk_search;
use voxelfm_core::encoder::{EncoderConfig, EncoderState};
use voxelfm_core::objectives::{loss_gradients, ntxent_intra, ObjectiveConfig, ScanPairs};

fn encoder(side: usize) -> EncoderState<f32> {
    let c = EncoderConfig { patch_shape: [side; 3], stages: 2, base_channels: 8, embed_dim: 32, proj_dim: 16 };
    EncoderState::init(&c, 0).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("encoder");
    for side in [12, 16] {
        let enc = encoder(side);
        let patch = noise_patch(side, 1);
        g.bench_with_input(BenchmarkId::new("forward", side), &patch, |b, p| {
            b.iter(|| enc.embed(black_box(p), true).unwrap())
        });
        let views = vec![patch.clone(), noise_patch(side, 2)];
        let upstream = vec![vec![0.1f32; 16]; 2];
        g.bench_with_input(BenchmarkId::new("forward_backward_2views", side), &views, |b, v| {
            b.iter(|| enc.gradients(black_box(v), &upstream).unwrap())
        });
    }
    g.finish();
}

fn ntxent(c: &mut Criterion) {
    let mut g = c.benchmark_group("ntxent");
    let cfg = ObjectiveConfig::ntxent(0.1);
    for m in [8, 32] {
        let (z1, z2) = embedding_pairs(m, 32, 3);
        g.bench_function(BenchmarkId::new("loss", m), |b| b.iter(|| ntxent_intra(black_box(&z1), &z2, 0.1).unwrap()));
        let groups = vec![ScanPairs { scan_id: 0, z1: z1.clone(), z2: z2.clone() }];
        g.bench_function(BenchmarkId::new("loss_and_grad", m), |b| {
            b.iter(|| loss_gradients(&cfg, black_box(&groups), None).unwrap())
        });
    }
    g.finish();
}

fn topk(c: &mut Criterion) {
    let mut g = c.benchmark_group("topk");
    for n in [1_000, 20_000] {
        let store = random_store(n, 64, 5);
        let query = store.records()[7].vector.clone();
        g.bench_function(BenchmarkId::new("k10", n), |b| b.iter(|| topk_search(black_box(&query), &store, 10).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, conv, ntxent, topk);
criterion_main!(benches);
