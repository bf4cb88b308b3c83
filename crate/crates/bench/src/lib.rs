//! Seeded synthetic inputs shared by the throughput benchmarks.

use codesearch::corpus::Language;
use codesearch::encoder::{EncoderConfig, EncoderParams};
use codesearch::index::{EmbeddingIndex, SnippetMeta};
use codesearch::tokenizer::BpeModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYLLABLES: [&str; 16] = ["get", "set", "read", "er", "ing", "json", "buf", "fer", "http", "re", "quest", "list", "node", "map", "str", "val"];

/// Identifier-like words built from a small syllable set.
pub fn words(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..rng.random_range(1..4)).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect())
        .collect()
}

pub fn bpe_model(vocab_size: usize) -> BpeModel {
    BpeModel::train(words(20_000, 1), vocab_size).expect("synthetic corpus trains")
}

pub fn params(vocab_size: usize, dim: usize, layers: usize) -> EncoderParams {
    EncoderParams::init(EncoderConfig::new(vocab_size, dim, layers), 7)
}

pub fn token_ids(len: usize, vocab_size: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(3..vocab_size as u32)).collect()
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Index of `n` random unit rows.
pub fn index(n: usize, dim: usize) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows = (0..n).map(|_| unit_vector(&mut rng, dim)).collect();
    let meta = (0..n)
        .map(|i| SnippetMeta { id: format!("snippet/{i:08}"), language: Language::ALL[i % 6], location: None })
        .collect();
    EmbeddingIndex::from_rows(dim, rows, meta, [0; 32]).expect("rows are unit length")
}

pub fn query(dim: usize) -> Vec<f64> {
    unit_vector(&mut ChaCha8Rng::seed_from_u64(12), dim)
}
