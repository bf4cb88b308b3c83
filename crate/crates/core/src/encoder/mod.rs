//! Neural bag-of-words encoder with per-language alignment, per-layer
//! self-attention pooling and softmax-weighted layer fusion.
//!
//! For an input of `m` token ids the forward pass is:
//!
//! ```text
//! E'[t]  = A_lang · embed[id_t]                    alignment
//! H_0    = E'
//! H_j[t] = f(W_j · H_{j-1}[t] + b_j)               j = 1..L
//! α_j    = softmax_t(w_j · H_j[t])                 over unmasked t
//! p_j    = Σ_t α_j[t] · H_j[t]
//! v      = g · Σ_j softmax(s)_j · p_j              fusion
//! out    = v / ‖v‖
//! ```
//!
//! Matrices indexed `[t]` are stored token-major: row `t` is the hidden
//! vector of token `t`. PAD ids are masked out of the attention softmax.
//! Kept ids are sorted before the pass: every stage treats the input as a
//! bag, and a fixed summation order makes the output bit-identical under
//! any permutation of the input.

mod checkpoint;
mod params;

use thiserror::Error;

pub use checkpoint::{fingerprint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use params::{DenseLayer, EncoderConfig, EncoderParams, Modality, Nonlinearity, ALIGN_MAPS, QUERY_MAP};

use crate::tokenizer::PAD_ID;

/// Tolerance on ‖v‖ for a vector to count as unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("no unmasked tokens to pool")]
    NoValidTokens,
    #[error("fused vector has zero norm")]
    Degenerate,
    #[error("cosine similarity needs unit-length inputs (norm {0})")]
    NotNormalized(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Token-major `[rows × cols]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self { rows: rows.len(), cols, data: rows.concat() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Unit-length copy; fails on the zero vector.
    pub fn normalize(values: Vec<f64>) -> Result<Self, EncoderError> {
        let n = norm(&values);
        if !n.is_finite() || n <= 0.0 {
            return Err(EncoderError::Degenerate);
        }
        Ok(Self { values: values.into_iter().map(|x| x / n).collect(), normalized: true })
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub modality: Modality,
    /// Unmasked token ids, sorted ascending.
    pub ids: Vec<u32>,
    /// `H_0..H_L`, each `[m × d]` over unmasked tokens.
    pub hidden: Vec<Matrix>,
    pub attention: Vec<Vec<f64>>,
    pub pooled: Vec<Vec<f64>>,
    pub fusion_weights: Vec<f64>,
    /// Fused vector before normalization.
    pub fused: Vec<f64>,
    pub output: EmbeddingVector,
}

/// Dot product with four interleaved accumulators, combined in a fixed
/// order so the result is deterministic.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `out = M · x` for a row-major square map.
fn mat_vec(map: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, row) in out.iter_mut().zip(map.chunks_exact(d)) {
        *o = dot(row, x);
    }
}

/// Looks up and aligns the unmasked tokens. Returns the kept ids (sorted)
/// with `E'`.
pub fn embed_and_align(params: &EncoderParams, ids: &[u32], modality: Modality) -> Result<(Vec<u32>, Matrix), EncoderError> {
    let vocab_size = params.config().vocab_size;
    let d = params.dim();
    let mut kept: Vec<u32> = ids.iter().copied().filter(|&id| id != PAD_ID).collect();
    kept.sort_unstable();
    if let Some(&id) = kept.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(EncoderError::IdOutOfRange { id, vocab_size });
    }
    if kept.is_empty() {
        return Err(EncoderError::NoValidTokens);
    }
    let map = &params.align[modality.align_index()];
    let mut e = Matrix::zeros(kept.len(), d);
    for (t, &id) in kept.iter().enumerate() {
        if t > 0 && kept[t - 1] == id {
            e.data.copy_within((t - 1) * d..t * d, t * d);
        } else {
            mat_vec(map, params.embedding_row(id), e.row_mut(t));
        }
    }
    Ok((kept, e))
}

/// `H_0 = E'`, `H_j = f(W_j H_{j-1} + b_j)` token by token.
pub fn mlp_forward(aligned: Matrix, params: &EncoderParams) -> Vec<Matrix> {
    let f = params.config().nonlinearity;
    let mut hidden = Vec::with_capacity(params.layers() + 1);
    hidden.push(aligned);
    for layer in &params.mlp {
        let prev = hidden.last().expect("H_0 present");
        let mut next = Matrix::zeros(prev.rows, prev.cols);
        let d = prev.cols;
        for t in 0..prev.rows {
            // Equal inputs give equal outputs; sorted ids make repeats adjacent.
            if t > 0 && prev.row(t) == prev.row(t - 1) {
                next.data.copy_within((t - 1) * d..t * d, t * d);
                continue;
            }
            let out = next.row_mut(t);
            mat_vec(&layer.weight, prev.row(t), out);
            for (o, b) in out.iter_mut().zip(&layer.bias) {
                *o = f.apply(*o + b);
            }
        }
        hidden.push(next);
    }
    hidden
}

/// Self-attention pooling of one layer. `mask[t] == false` drops token `t`;
/// masked tokens get zero weight. Returns the pooled vector and the weights.
pub fn attention_pool(hidden: &Matrix, w: &[f64], mask: Option<&[bool]>) -> Result<(Vec<f64>, Vec<f64>), EncoderError> {
    if w.len() != hidden.cols {
        return Err(EncoderError::DimensionMismatch(w.len(), hidden.cols));
    }
    let valid = |t: usize| mask.is_none_or(|m| m[t]);
    let positions: Vec<usize> = (0..hidden.rows).filter(|&t| valid(t)).collect();
    if positions.is_empty() {
        return Err(EncoderError::NoValidTokens);
    }
    let scores: Vec<f64> = positions.iter().map(|&t| dot(w, hidden.row(t))).collect();
    let weights = softmax(&scores);
    let mut alpha = vec![0.0; hidden.rows];
    let mut pooled = vec![0.0; hidden.cols];
    for (&t, &a) in positions.iter().zip(&weights) {
        alpha[t] = a;
        for (p, h) in pooled.iter_mut().zip(hidden.row(t)) {
            *p += a * h;
        }
    }
    Ok((pooled, alpha))
}

/// `g · Σ_j softmax(logits)_j · p_j`. Returns the fused vector and weights.
pub fn fuse(pooled: &[Vec<f64>], logits: &[f64], scale: f64) -> (Vec<f64>, Vec<f64>) {
    let s = softmax(logits);
    let d = pooled.first().map_or(0, Vec::len);
    let mut out = vec![0.0; d];
    for (p, &w) in pooled.iter().zip(&s) {
        for (o, x) in out.iter_mut().zip(p) {
            *o += w * x;
        }
    }
    for o in &mut out {
        *o *= scale;
    }
    (out, s)
}

/// Full forward pass, keeping every intermediate.
pub fn encode_with_trace(params: &EncoderParams, ids: &[u32], modality: Modality) -> Result<ForwardTrace, EncoderError> {
    let (kept, aligned) = embed_and_align(params, ids, modality)?;
    let hidden = mlp_forward(aligned, params);
    let mut attention = Vec::with_capacity(hidden.len());
    let mut pooled = Vec::with_capacity(hidden.len());
    for (j, h) in hidden.iter().enumerate() {
        let (p, a) = attention_pool(h, params.attn_vector(modality, j), None)?;
        pooled.push(p);
        attention.push(a);
    }
    let (fused, fusion_weights) = fuse(&pooled, &params.fusion_logits, params.fusion_scale);
    let output = EmbeddingVector::normalize(fused.clone())?;
    Ok(ForwardTrace { modality, ids: kept, hidden, attention, pooled, fusion_weights, fused, output })
}

/// Unit-length embedding of a token id sequence.
pub fn encode(params: &EncoderParams, ids: &[u32], modality: Modality) -> Result<EmbeddingVector, EncoderError> {
    encode_with_trace(params, ids, modality).map(|t| t.output)
}

/// Cosine of two unit vectors, i.e. their dot product clamped to [-1, 1].
pub fn cosine_sim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EncoderError> {
    if a.values.len() != b.values.len() {
        return Err(EncoderError::DimensionMismatch(a.values.len(), b.values.len()));
    }
    for v in [a, b] {
        let n = v.norm();
        if !v.normalized || (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EncoderError::NotNormalized(n));
        }
    }
    Ok(dot(&a.values, &b.values).clamp(-1.0, 1.0))
}

/// Accumulates into `grads` the gradient of a scalar loss whose derivative
/// with respect to the normalized output is `grad_output`.
pub fn backward(params: &EncoderParams, trace: &ForwardTrace, grad_output: &[f64], grads: &mut EncoderParams) {
    let d = params.dim();
    let f = params.config().nonlinearity;
    let y = &trace.output.values;
    let n = norm(&trace.fused);

    // out = v / ‖v‖
    let proj = dot(y, grad_output);
    let dv: Vec<f64> = grad_output.iter().zip(y).map(|(g, yi)| (g - yi * proj) / n).collect();

    // v = g · Σ s_j p_j
    let g = params.fusion_scale;
    let s = &trace.fusion_weights;
    let mut mixed = vec![0.0; d];
    for (p, &w) in trace.pooled.iter().zip(s) {
        for (m, x) in mixed.iter_mut().zip(p) {
            *m += w * x;
        }
    }
    grads.fusion_scale += dot(&mixed, &dv);
    let ds: Vec<f64> = trace.pooled.iter().map(|p| g * dot(p, &dv)).collect();
    let mean_ds = dot(s, &ds);
    for ((gl, &sj), &dsj) in grads.fusion_logits.iter_mut().zip(s).zip(&ds) {
        *gl += sj * (dsj - mean_ds);
    }

    let layers = params.layers();
    let m = trace.ids.len();
    let mut dh = Matrix::zeros(m, d);
    for j in (0..=layers).rev() {
        let h = &trace.hidden[j];
        let alpha = &trace.attention[j];
        let dp: Vec<f64> = dv.iter().map(|x| g * s[j] * x).collect();
        let w_index = params.attn_index(trace.modality, j);
        let w = &params.attn[w_index];

        // p = Σ α_t h_t, α = softmax(w · h_t)
        let dalpha: Vec<f64> = (0..m).map(|t| dot(h.row(t), &dp)).collect();
        let mean_dalpha = dot(alpha, &dalpha);
        let gw = &mut grads.attn[w_index];
        for t in 0..m {
            let dscore = alpha[t] * (dalpha[t] - mean_dalpha);
            let row = dh.row_mut(t);
            for k in 0..d {
                row[k] += alpha[t] * dp[k] + dscore * w[k];
                gw[k] += dscore * h.row(t)[k];
            }
        }

        if j == 0 {
            break;
        }
        // h_j = f(W h_{j-1} + b)
        let layer = &params.mlp[j - 1];
        let glayer = &mut grads.mlp[j - 1];
        let prev = &trace.hidden[j - 1];
        let mut dprev = Matrix::zeros(m, d);
        for t in 0..m {
            let dz: Vec<f64> = dh.row(t).iter().zip(h.row(t)).map(|(g, &o)| g * f.derivative_from_output(o)).collect();
            let x = prev.row(t);
            let out = dprev.row_mut(t);
            for (o, &dzo) in dz.iter().enumerate() {
                if dzo == 0.0 {
                    continue;
                }
                glayer.bias[o] += dzo;
                let wrow = &layer.weight[o * d..(o + 1) * d];
                let grow = &mut glayer.weight[o * d..(o + 1) * d];
                for i in 0..d {
                    grow[i] += dzo * x[i];
                    out[i] += wrow[i] * dzo;
                }
            }
        }
        dh = dprev;
    }

    // E'_t = A e_t
    let a_index = trace.modality.align_index();
    let map = &params.align[a_index];
    for (t, &id) in trace.ids.iter().enumerate() {
        let de = dh.row(t);
        let e = params.embedding_row(id);
        let gmap = &mut grads.align[a_index];
        for (o, &deo) in de.iter().enumerate() {
            if deo == 0.0 {
                continue;
            }
            for i in 0..d {
                gmap[o * d + i] += deo * e[i];
            }
        }
        let row = &mut grads.embed[id as usize * d..(id as usize + 1) * d];
        for (o, &deo) in de.iter().enumerate() {
            let mrow = &map[o * d..(o + 1) * d];
            for i in 0..d {
                row[i] += mrow[i] * deo;
            }
        }
    }
}
