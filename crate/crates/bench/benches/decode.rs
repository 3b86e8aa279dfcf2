//! Decode-throughput benchmarks: beam search across batch sizes and beam
//! widths, plus dense vs sparse inference on a pruned model.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use snmt_core::compress::{magnitude_prune, PruneScope};
use snmt_core::decoding::{batch_translate, DecodeOptions};
use snmt_core::model::{InferModel, ModelConfig, NmtModel, SentenceInput};
use snmt_core::SplitMix64;

fn build_model(layers: usize, dim: usize) -> NmtModel<f32> {
    let mut cfg = ModelConfig::new(50, 50, dim, dim);
    cfg.num_layers = layers;
    cfg.bidirectional = true;
    let mut m = NmtModel::new(cfg, 7);
    for (_, t) in m.params.iter_mut() {
        for v in t.data.iter_mut() {
            *v *= 4.0;
        }
    }
    m
}

fn sample_sentences(n: usize) -> Vec<SentenceInput> {
    let mut rng = SplitMix64::new(42);
    (0..n)
        .map(|_| {
            let len = 4 + (rng.next_u64() % 12) as usize;
            SentenceInput::plain(
                (0..len)
                    .map(|_| 4 + (rng.next_u64() % 46) as u32)
                    .collect(),
            )
        })
        .collect()
}

fn bench_batch_sizes(c: &mut Criterion) {
    let model = build_model(2, 64);
    let im = InferModel::dense(&model);
    let sentences = sample_sentences(32);
    let tokens: u64 = sentences.iter().map(|s| s.words.len() as u64).sum();

    let mut group = c.benchmark_group("beam5_by_batch");
    group.throughput(Throughput::Elements(tokens));
    for b in [1usize, 4, 16] {
        group.bench_with_input(BenchmarkId::from_parameter(b), &b, |bench, &b| {
            let opts = DecodeOptions {
                beam: 5,
                max_len: 24,
                ..DecodeOptions::default()
            };
            bench.iter(|| batch_translate(&[&im], &sentences, b, &opts).unwrap());
        });
    }
    group.finish();
}

fn bench_beam_widths(c: &mut Criterion) {
    let model = build_model(2, 64);
    let im = InferModel::dense(&model);
    let sentences = sample_sentences(16);

    let mut group = c.benchmark_group("batch8_by_beam");
    for k in [1usize, 2, 5, 10] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, &k| {
            let opts = DecodeOptions {
                beam: k,
                max_len: 24,
                ..DecodeOptions::default()
            };
            bench.iter(|| batch_translate(&[&im], &sentences, 8, &opts).unwrap());
        });
    }
    group.finish();
}

fn bench_sparse(c: &mut Criterion) {
    let mut model = build_model(2, 64);
    magnitude_prune(&mut model, 0.6, PruneScope::ClassBlind).unwrap();
    let dense = InferModel::dense(&model);
    let sparse = InferModel::sparse(&model);
    let sentences = sample_sentences(16);
    let opts = DecodeOptions {
        beam: 2,
        max_len: 24,
        ..DecodeOptions::default()
    };

    let mut group = c.benchmark_group("pruned60_inference");
    group.bench_function("dense", |bench| {
        bench.iter(|| batch_translate(&[&dense], &sentences, 8, &opts).unwrap());
    });
    group.bench_function("sparse", |bench| {
        bench.iter(|| batch_translate(&[&sparse], &sentences, 8, &opts).unwrap());
    });
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_batch_sizes, bench_beam_widths, bench_sparse
}
criterion_main!(benches);
