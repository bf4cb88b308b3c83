//! Persisted code-vector index with exact top-k cosine search.
//!
//! ```text
//! magic        "SCSI v1\n"
//! dims         N, d                          2 × u32 LE
//! rows         N × d f32 LE
//! meta × N     u32 id length, id bytes, language byte,
//!              u32 location length (u32::MAX = none), location bytes
//! fingerprint  32 bytes
//! checksum     SHA-256 of everything above   32 bytes
//! ```

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusSplit, Language};
use crate::encoder::{encode, fingerprint, EncoderError, EncoderParams, Modality};
use crate::io_util::{hex, sha256, write_atomic, Digest32, Reader};
use crate::tokenizer::{TokenizeError, Tokenizer};

const MAGIC: &[u8; 8] = b"SCSI v1\n";
const NO_LOCATION: u32 = u32::MAX;
/// Rows scored per parallel work unit.
const SCAN_BLOCK: usize = 1024;
pub const ROW_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from an empty corpus")]
    EmptyCorpus,
    #[error("no entry of the corpus could be encoded ({skipped} skipped)")]
    NothingEncoded { skipped: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("index was built with model {index} but the query model is {model}")]
    Stale { index: String, model: String },
    #[error("query is empty after tokenization")]
    EmptyQuery,
    #[error("query vector has dimension {query}, index has {index}")]
    DimensionMismatch { query: usize, index: usize },
    #[error("duplicate snippet id {0:?}")]
    DuplicateId(String),
    #[error("row {row} has norm {norm}, expected 1")]
    NotNormalized { row: usize, norm: f64 },
    #[error("not an index file (bad magic)")]
    Format,
    #[error("index file is truncated or corrupted")]
    Corrupted,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenize(TokenizeError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnippetMeta {
    pub id: String,
    pub language: Language,
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    /// 1-based.
    pub rank: usize,
    pub score: f64,
    pub id: String,
}

/// Immutable matrix of unit code vectors and their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    vectors: Vec<f32>,
    meta: Vec<SnippetMeta>,
    fingerprint: Digest32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    pub index: EmbeddingIndex,
    /// Ids of entries that could not be encoded.
    pub skipped: Vec<String>,
}

impl EmbeddingIndex {
    /// Assembles an index from rows, validating norms and id uniqueness.
    pub fn from_rows(dim: usize, rows: Vec<Vec<f64>>, meta: Vec<SnippetMeta>, fingerprint: Digest32) -> Result<Self, IndexError> {
        if rows.len() != meta.len() {
            return Err(IndexError::Corrupted);
        }
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(IndexError::DimensionMismatch { query: row.len(), index: dim });
            }
            vectors.extend(row.iter().map(|&x| x as f32));
            let norm = row_norm(&vectors[r * dim..]);
            if (norm - 1.0).abs() > ROW_NORM_TOLERANCE {
                return Err(IndexError::NotNormalized { row: r, norm });
            }
        }
        let index = Self { dim, vectors, meta, fingerprint };
        index.check_ids()?;
        Ok(index)
    }

    fn check_ids(&self) -> Result<(), IndexError> {
        let mut seen = HashSet::with_capacity(self.meta.len());
        for m in &self.meta {
            if !seen.insert(m.id.as_str()) {
                return Err(IndexError::DuplicateId(m.id.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[SnippetMeta] {
        &self.meta
    }

    pub fn fingerprint(&self) -> &Digest32 {
        &self.fingerprint
    }

    /// Row position of every id.
    pub fn positions(&self) -> HashMap<&str, usize> {
        self.meta.iter().enumerate().map(|(i, m)| (m.id.as_str(), i)).collect()
    }

    /// Fails unless `params` is the model the index was built with.
    pub fn check_model(&self, params: &EncoderParams) -> Result<(), IndexError> {
        let model = fingerprint(params);
        if model != self.fingerprint {
            return Err(IndexError::Stale { index: hex(&self.fingerprint), model: hex(&model) });
        }
        Ok(())
    }

    /// Cosine of `query` (unit length) with every row, in row order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>, IndexError> {
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch { query: query.len(), index: self.dim });
        }
        let mut out = vec![0.0; self.len()];
        if self.dim == 0 {
            return Ok(out);
        }
        out.par_chunks_mut(SCAN_BLOCK)
            .zip(self.vectors.par_chunks(SCAN_BLOCK * self.dim))
            .for_each(|(scores, block)| {
                for (s, row) in scores.iter_mut().zip(block.chunks_exact(self.dim)) {
                    *s = row_dot(row, query);
                }
            });
        Ok(out)
    }

    /// Exact top-k by (score desc, id asc) for an already encoded query.
    pub fn search_vector(&self, query: &[f64], k: usize) -> Result<Vec<RankedResult>, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        let scores = self.scores(query)?;
        let order = |&a: &usize, &b: &usize| rank_order(scores[a], &self.meta[a].id, scores[b], &self.meta[b].id);
        let mut rows: Vec<usize> = (0..self.len()).collect();
        let k = k.min(rows.len());
        if k < rows.len() {
            rows.select_nth_unstable_by(k - 1, order);
            rows.truncate(k);
        }
        rows.sort_unstable_by(order);
        Ok(rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| RankedResult { rank: i + 1, score: scores[r], id: self.meta[r].id.clone() })
            .collect())
    }
}

/// f64 dot product of a stored row with a query, four lanes wide and
/// combined in a fixed order. Every scorer in the crate goes through here.
pub fn row_dot(row: &[f32], query: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (cr, cq) = (row.chunks_exact(4), query.chunks_exact(4));
    let (rr, rq) = (cr.remainder(), cq.remainder());
    for (x, q) in cr.zip(cq) {
        for k in 0..4 {
            acc[k] += x[k] as f64 * q[k];
        }
    }
    let mut tail = 0.0;
    for (&x, &q) in rr.iter().zip(rq) {
        tail += x as f64 * q;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Result ordering: higher score first, then ascending id.
pub fn rank_order(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

/// Encodes the code side of every entry. Entries that fail to encode are
/// skipped and reported.
pub fn build_index(corpus: &CorpusSplit, params: &EncoderParams, tokenizer: &Tokenizer) -> Result<BuildReport, IndexError> {
    if corpus.is_empty() {
        return Err(IndexError::EmptyCorpus);
    }
    let encoded: Vec<Option<Vec<f64>>> = corpus
        .entries
        .par_iter()
        .map(|e| {
            let ids = tokenizer.encode_code(&e.code_tokens).ok()?;
            encode(params, ids.ids(), Modality::Code(e.language)).ok().map(|v| v.values)
        })
        .collect();
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    let mut skipped = Vec::new();
    for (entry, row) in corpus.entries.iter().zip(encoded) {
        match row {
            Some(r) => {
                rows.push(r);
                meta.push(SnippetMeta { id: entry.id.clone(), language: entry.language, location: None });
            }
            None => skipped.push(entry.id.clone()),
        }
    }
    if rows.is_empty() {
        return Err(IndexError::NothingEncoded { skipped: skipped.len() });
    }
    let index = EmbeddingIndex::from_rows(params.dim(), rows, meta, fingerprint(params))?;
    Ok(BuildReport { index, skipped })
}

/// Encodes a typed query. Also used by evaluation and the CLI loop.
pub fn encode_query(query_text: &str, params: &EncoderParams, tokenizer: &Tokenizer) -> Result<Vec<f64>, IndexError> {
    let ids = tokenizer.encode_query(query_text).map_err(|e| match e {
        TokenizeError::Empty => IndexError::EmptyQuery,
        other => IndexError::Tokenize(other),
    })?;
    Ok(encode(params, ids.ids(), Modality::Query)?.values)
}

/// Exact top-k cosine retrieval for raw query text.
pub fn query_topk(
    query_text: &str,
    index: &EmbeddingIndex,
    params: &EncoderParams,
    tokenizer: &Tokenizer,
    k: usize,
) -> Result<Vec<RankedResult>, IndexError> {
    if k == 0 {
        return Err(IndexError::InvalidK);
    }
    index.check_model(params)?;
    let q = encode_query(query_text, params, tokenizer)?;
    index.search_vector(&q, k)
}

pub fn write_index(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + 4 * index.vectors.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(index.len() as u32).to_le_bytes());
    out.extend_from_slice(&(index.dim as u32).to_le_bytes());
    for x in &index.vectors {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for m in &index.meta {
        out.extend_from_slice(&(m.id.len() as u32).to_le_bytes());
        out.extend_from_slice(m.id.as_bytes());
        out.push(m.language.index() as u8);
        match &m.location {
            Some(loc) => {
                out.extend_from_slice(&(loc.len() as u32).to_le_bytes());
                out.extend_from_slice(loc.as_bytes());
            }
            None => out.extend_from_slice(&NO_LOCATION.to_le_bytes()),
        }
    }
    out.extend_from_slice(&index.fingerprint);
    let checksum = sha256(&out);
    out.extend_from_slice(&checksum);
    out
}

pub fn read_index(bytes: &[u8]) -> Result<EmbeddingIndex, IndexError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(IndexError::Format);
    }
    if bytes.len() < MAGIC.len() + 8 + 64 {
        return Err(IndexError::Corrupted);
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if sha256(body) != checksum {
        return Err(IndexError::Corrupted);
    }
    let mut r = Reader::new(&body[MAGIC.len()..]);
    let n = r.u32().ok_or(IndexError::Corrupted)? as usize;
    let dim = r.u32().ok_or(IndexError::Corrupted)? as usize;
    let values = n.checked_mul(dim).ok_or(IndexError::Corrupted)?;
    if r.remaining() < values.saturating_mul(4) {
        return Err(IndexError::Corrupted);
    }
    let mut vectors = Vec::with_capacity(values);
    for _ in 0..values {
        vectors.push(r.f32().ok_or(IndexError::Corrupted)?);
    }
    let string = |r: &mut Reader, len: usize| -> Result<String, IndexError> {
        let b = r.take(len).ok_or(IndexError::Corrupted)?;
        String::from_utf8(b.to_vec()).map_err(|_| IndexError::Corrupted)
    };
    let mut meta = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32().ok_or(IndexError::Corrupted)? as usize;
        let id = string(&mut r, len)?;
        let language = Language::from_index(r.u8().ok_or(IndexError::Corrupted)? as usize).ok_or(IndexError::Corrupted)?;
        let loc_len = r.u32().ok_or(IndexError::Corrupted)?;
        let location = if loc_len == NO_LOCATION { None } else { Some(string(&mut r, loc_len as usize)?) };
        meta.push(SnippetMeta { id, language, location });
    }
    let fp: Digest32 = r.take(32).ok_or(IndexError::Corrupted)?.try_into().map_err(|_| IndexError::Corrupted)?;
    if r.remaining() != 0 {
        return Err(IndexError::Corrupted);
    }
    let index = EmbeddingIndex { dim, vectors, meta, fingerprint: fp };
    index.check_ids()?;
    for row in 0..n {
        let norm = row_norm(index.row(row));
        if (norm - 1.0).abs() > ROW_NORM_TOLERANCE {
            return Err(IndexError::NotNormalized { row, norm });
        }
    }
    Ok(index)
}

pub fn save_index(index: &EmbeddingIndex, path: &Path) -> Result<(), IndexError> {
    write_atomic(path, &write_index(index)).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })
}

pub fn load_index(path: &Path) -> Result<EmbeddingIndex, IndexError> {
    let bytes = std::fs::read(path).map_err(|source| IndexError::Io { path: path.to_path_buf(), source })?;
    read_index(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn meta(id: &str) -> SnippetMeta {
        SnippetMeta { id: id.into(), language: Language::Go, location: None }
    }

    fn small() -> EmbeddingIndex {
        let rows = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0]), unit(&[1.0, 0.0]), unit(&[1.0, 1.0])];
        let meta = ["c", "d", "a", "b"].iter().map(|s| meta(s)).collect();
        EmbeddingIndex::from_rows(2, rows, meta, [7; 32]).unwrap()
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let idx = small();
        let r = idx.search_vector(&[1.0, 0.0], 2).unwrap();
        assert_eq!(r.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(r[0].rank, 1);
        assert_eq!(r[0].score, 1.0);
    }

    #[test]
    fn k_beyond_size_returns_everything_sorted() {
        let idx = small();
        let r = idx.search_vector(&[1.0, 0.0], 100).unwrap();
        assert_eq!(r.iter().map(|x| x.id.as_str()).collect::<Vec<_>>(), ["a", "c", "b", "d"]);
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(matches!(idx.search_vector(&[1.0, 0.0], 0), Err(IndexError::InvalidK)));
        assert!(matches!(idx.search_vector(&[1.0], 1), Err(IndexError::DimensionMismatch { .. })));
    }

    #[test]
    fn validation_on_build() {
        assert!(matches!(
            EmbeddingIndex::from_rows(2, vec![vec![1.0, 1.0]], vec![meta("x")], [0; 32]),
            Err(IndexError::NotNormalized { .. })
        ));
        assert!(matches!(
            EmbeddingIndex::from_rows(2, vec![unit(&[1.0, 0.0]); 2], vec![meta("x"), meta("x")], [0; 32]),
            Err(IndexError::DuplicateId(_))
        ));
    }

    #[test]
    fn file_round_trip_and_damage() {
        let mut idx = small();
        idx.meta[1].location = Some("src/a.go:10".into());
        idx.meta[2].language = Language::Ruby;
        let bytes = write_index(&idx);
        assert_eq!(&bytes[..8], b"SCSI v1\n");
        let back = read_index(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(write_index(&back), bytes);

        assert!(matches!(read_index(&bytes[..bytes.len() - 1]), Err(IndexError::Corrupted)));
        assert!(matches!(read_index(&bytes[..20]), Err(IndexError::Corrupted)));
        let mut flipped = bytes.clone();
        flipped[17] ^= 0x40;
        assert!(matches!(read_index(&flipped), Err(IndexError::Corrupted)));
        let mut magic = bytes;
        magic[3] = b'X';
        assert!(matches!(read_index(&magic), Err(IndexError::Format)));
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.bin");
        let idx = small();
        save_index(&idx, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
        assert!(matches!(load_index(&dir.path().join("missing")), Err(IndexError::Io { .. })));
    }
}
