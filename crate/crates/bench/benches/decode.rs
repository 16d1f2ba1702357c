//! Whole-pipeline decode benchmarks: vanilla vs chain vs tree speculation
//! on a small model, so the speedup ratio (tau against per-round overhead)
//! is visible at desk scale.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use specdec_core::draft::{init_draft, DraftWeights};
use specdec_core::model::init_model;
use specdec_core::positions::vanilla_indices;
use specdec_core::tensor::RngStream;
use specdec_core::verify::{decode_loop, DecodeMode, DecodeParams, DraftPolicy};
use specdec_core::{ModelConfig, ModelWeights, Token};

struct Fixture {
    target: ModelWeights<f32>,
    draft: DraftWeights<f32>,
    prompt: Vec<Token>,
    indices: Vec<usize>,
}

fn fixture() -> Fixture {
    let config = ModelConfig {
        vocab_size: 256,
        dim: 64,
        n_layers: 4,
        n_heads: 4,
        head_dim: 16,
        ffn_dim: 256,
        window_w: 64,
        gamma: 4,
        beam_widths: vec![2, 2, 2, 2],
        ..ModelConfig::default()
    };
    let mut wrng = RngStream::new(10, "weights");
    let target = init_model(&config, &mut wrng).unwrap();
    let mut drng = RngStream::new(10, "draft-weights");
    let draft = init_draft(&config, &mut drng).unwrap();
    let mut prng = RngStream::new(10, "prompt");
    let prompt: Vec<Token> = (0..128).map(|_| prng.token(config.vocab_size)).collect();
    let indices = vanilla_indices(0, prompt.len());
    Fixture { target, draft, prompt, indices }
}

fn params(mode: DecodeMode, beam_widths: Vec<usize>, gen_len: usize) -> DecodeParams {
    DecodeParams {
        gen_len,
        mode,
        beam_widths,
        temperature: 0.0,
        seed: 1,
        dump_trees: false,
    }
}

fn bench_decode(c: &mut Criterion) {
    let f = fixture();
    let gen_len = 64;

    let mut group = c.benchmark_group("decode");
    group.sample_size(10);
    group.throughput(Throughput::Elements(gen_len as u64));

    group.bench_function(BenchmarkId::new("vanilla", gen_len), |b| {
        b.iter(|| {
            decode_loop(
                &f.target,
                &DraftPolicy::Oracle,
                black_box(&f.prompt),
                &f.indices,
                &params(DecodeMode::Vanilla, Vec::new(), gen_len),
            )
            .unwrap()
        })
    });
    group.bench_function(BenchmarkId::new("chain_glide", gen_len), |b| {
        b.iter(|| {
            decode_loop(
                &f.target,
                &DraftPolicy::Glide { draft: &f.draft, cross_layer: None },
                black_box(&f.prompt),
                &f.indices,
                &params(DecodeMode::Chain, vec![1; 4], gen_len),
            )
            .unwrap()
        })
    });
    group.bench_function(BenchmarkId::new("tree_glide", gen_len), |b| {
        b.iter(|| {
            decode_loop(
                &f.target,
                &DraftPolicy::Glide { draft: &f.draft, cross_layer: None },
                black_box(&f.prompt),
                &f.indices,
                &params(DecodeMode::Tree, vec![2, 2, 2, 2], gen_len),
            )
            .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_decode);
criterion_main!(benches);
