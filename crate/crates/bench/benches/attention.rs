//! Attention kernel benchmarks: the blockwise spec partial, the LSE merge,
//! and the full hybrid tree attention across cache sizes.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use specdec_core::attention::{attend_cache, attend_specs, hybrid_tree_attention, merge_attention};
use specdec_core::tensor::RngStream;
use specdec_core::{Tensor2, TreeMask};

const HEAD_DIM: usize = 64;

fn randv(rng: &mut RngStream, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.normal() as f32).collect()
}

fn bench_partials(c: &mut Criterion) {
    let mut rng = RngStream::new(1, "bench-attn");
    let q = randv(&mut rng, HEAD_DIM);

    let mut group = c.benchmark_group("cache_partial");
    for n_cache in [64_usize, 512, 4096] {
        let keys = randv(&mut rng, n_cache * HEAD_DIM);
        let values = randv(&mut rng, n_cache * HEAD_DIM);
        group.throughput(Throughput::Elements(n_cache as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n_cache), &n_cache, |b, _| {
            b.iter(|| attend_cache(black_box(&q), &keys, &values, HEAD_DIM).unwrap())
        });
    }
    group.finish();

    let n_spec = 16;
    let sk = randv(&mut rng, n_spec * HEAD_DIM);
    let sv = randv(&mut rng, n_spec * HEAD_DIM);
    let visible = vec![true; n_spec];
    let pa = attend_cache(&q, &sk, &sv, HEAD_DIM).unwrap();
    let pb = attend_specs(&q, &sk, &sv, &visible, HEAD_DIM).unwrap();
    c.bench_function("spec_partial_16", |b| {
        b.iter(|| attend_specs(black_box(&q), &sk, &sv, &visible, HEAD_DIM).unwrap())
    });
    c.bench_function("lse_merge", |b| {
        b.iter(|| merge_attention(black_box(&pa), black_box(&pb)))
    });
}

fn bench_hybrid(c: &mut Criterion) {
    let mut rng = RngStream::new(2, "bench-attn");
    let n_spec = 16;
    // A chain-shaped mask is the deepest-visibility worst case.
    let parents: Vec<Option<usize>> = (0..n_spec).map(|i: usize| i.checked_sub(1)).collect();
    let mask = TreeMask::from_parents(&parents).unwrap();
    let queries = Tensor2::from_vec(n_spec, HEAD_DIM, randv(&mut rng, n_spec * HEAD_DIM)).unwrap();
    let sk = randv(&mut rng, n_spec * HEAD_DIM);
    let sv = randv(&mut rng, n_spec * HEAD_DIM);

    let mut group = c.benchmark_group("hybrid_tree_attention");
    for n_cache in [256_usize, 2048] {
        let ck = randv(&mut rng, n_cache * HEAD_DIM);
        let cv = randv(&mut rng, n_cache * HEAD_DIM);
        group.throughput(Throughput::Elements((n_cache * n_spec) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n_cache), &n_cache, |b, _| {
            b.iter(|| {
                hybrid_tree_attention(
                    black_box(&queries),
                    &ck,
                    &cv,
                    &sk,
                    &sv,
                    &mask,
                    HEAD_DIM,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_partials, bench_hybrid);
criterion_main!(benches);
