use codesearch::encoder::{encode, Modality};
use codesearch::Language;
use codesearch_bench as fixtures;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

fn bpe_encode(c: &mut Criterion) {
    let model = fixtures::bpe_model(2000);
    let words = fixtures::words(1000, 2);
    let mut group = c.benchmark_group("bpe_encode");
    group.throughput(Throughput::Elements(words.len() as u64));
    group.bench_function("1000_words", |b| b.iter(|| words.iter().map(|w| model.encode(black_box(w)).len()).sum::<usize>()));
    group.finish();
}

fn encoder_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("encode");
    for (dim, layers) in [(64, 1), (128, 1), (128, 2)] {
        let params = fixtures::params(8192, dim, layers);
        let ids = fixtures::token_ids(256, 8192, 3);
        group.throughput(Throughput::Elements(ids.len() as u64));
        group.bench_with_input(BenchmarkId::new("code_256_tokens", format!("d{dim}_L{layers}")), &ids, |b, ids| {
            b.iter(|| encode(&params, black_box(ids), Modality::Code(Language::Python)).unwrap())
        });
    }
    group.finish();
}

fn index_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("index_top10");
    group.sample_size(20);
    for n in [10_000, 100_000] {
        let index = fixtures::index(n, 128);
        let q = fixtures::query(128);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &q, |b, q| b.iter(|| index.search_vector(black_box(q), 10).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bpe_encode, encoder_forward, index_scan);
criterion_main!(benches);
