//! Semantic code search with a neural bag-of-words bi-encoder.
//!
//! Docstrings and code snippets are tokenized into shared BPE subwords,
//! embedded by a per-language aligned, attention-pooled encoder into one
//! unit-length vector space, and retrieved by exact cosine scan.

pub mod corpus;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod io_util;
pub mod tokenizer;
pub mod training;

use thiserror::Error;

pub use corpus::{CorpusEntry, CorpusError, CorpusSplit, Language, LoadOptions, Partition};
pub use encoder::{
    cosine_sim, encode, CheckpointError, EmbeddingVector, EncoderConfig, EncoderError, EncoderParams, Modality,
};
pub use eval::{evaluate, EvalConfig, EvalError, EvalReport};
pub use index::{build_index, load_index, query_topk, save_index, EmbeddingIndex, IndexError, RankedResult};
pub use tokenizer::{BpeError, BpeModel, TokenIdSequence, TokenizeError, Tokenizer};
pub use training::{train, TrainConfig, TrainError};

/// Any error raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Bpe(#[from] BpeError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
